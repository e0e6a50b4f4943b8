import json

import numpy as np
import pytest

from artifact import io as fio
from artifact import profiles as P
from artifact.cli import main
from artifact.domain import build_domain
from artifact.ends import EndCharge
from artifact.errors import FormatError
from artifact.fields import DensityField, DiffeoMap


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def line_files(tmp_path):
    dom = tmp_path / "line.json"
    assert run("mkdomain", "--kind", "line", "--nodes", "513", "--truncation", "10", "--out", dom) == 0
    omega = tmp_path / "omega.bin"
    assert run("mkfield", "--domain", dom, "--profile", "uniform", "--out", omega) == 0
    return tmp_path, dom, omega


@pytest.mark.parametrize("profile", ["uniform", "bump", "random"])
def test_mkfield_round_trip_is_bit_exact(tmp_path, profile):
    dom = tmp_path / "cyl.json"
    assert run("mkdomain", "--kind", "cylinder", "--nodes", "32x128", "--truncation", "5",
               "--out", dom) == 0
    out = tmp_path / "f.bin"
    assert run("mkfield", "--domain", dom, "--profile", profile, "--seed", "7", "--out", out) == 0
    d = fio.load_domain(dom)
    want = P.field_profile(d, profile, seed=7)
    got = fio.load_field(out)
    assert np.array_equal(got.samples, want.samples), "samples must round-trip bit-exactly"
    assert got.tails == want.tails


def test_map_round_trip(tmp_path):
    d = P.line(T=10, nodes=257)
    h = P.translation(d, 0.75)
    fio.save_map(tmp_path / "h.bin", h)
    back = fio.load_map(tmp_path / "h.bin")
    assert np.array_equal(back.disp, h.disp) and back.shifts == h.shifts


def test_format_errors_name_field_and_offset(tmp_path):
    d = build_domain(kind="interval", nodes=64)
    path = tmp_path / "mu.bin"
    fio.save_field(path, DensityField.uniform(d))
    raw = path.read_bytes()
    start = raw.index(b"\n") + 1
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError) as exc:
        fio.load(tmp_path / "short.bin")
    assert exc.value.field == "data.nbytes" or exc.value.field == "data", f"field {exc.value.field}"
    bad = bytearray(raw)
    bad[start + 8 * 5:start + 8 * 6] = np.array([np.nan]).astype("<f8").tobytes()
    (tmp_path / "nan.bin").write_bytes(bytes(bad))
    with pytest.raises(FormatError) as exc:
        fio.load(tmp_path / "nan.bin")
    assert exc.value.offset == start + 40, f"offset {exc.value.offset}"
    (tmp_path / "junk.bin").write_bytes(b"{oops\n")
    with pytest.raises(FormatError) as exc:
        fio.load(tmp_path / "junk.bin")
    assert exc.value.field == "header"


def test_truncated_payload_is_reported(tmp_path):
    d = build_domain(kind="interval", nodes=64)
    path = tmp_path / "mu.bin"
    fio.save_field(path, DensityField.uniform(d))
    header, _, payload = path.read_bytes().partition(b"\n")
    obj = json.loads(header)
    obj["data"]["nbytes"] = len(payload)
    path.write_bytes(json.dumps(obj).encode() + b"\n" + payload[:-16])
    with pytest.raises(FormatError) as exc:
        fio.load(path)
    assert exc.value.field == "data" and exc.value.offset is not None


def test_cli_malformed_file_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a header")
    out = tmp_path / "c.json"
    code = run("endcharge", "--omega", bad, "--map", bad, "--out", out)
    assert code == 2 and "header" in capsys.readouterr().err


def test_morph_equal_fields_gives_identity(tmp_path):
    dom = tmp_path / "sq.json"
    assert run("mkdomain", "--kind", "rectangle", "--nodes", "64", "--out", dom) == 0
    mu = tmp_path / "mu.bin"
    assert run("mkfield", "--domain", dom, "--profile", "bump", "--out", mu) == 0
    rep = tmp_path / "r.json"
    plot = tmp_path / "p.csv"
    out = tmp_path / "psi.bin"
    assert run("morph", "--mu", mu, "--nu", mu, "--out", out, "--report", rep, "--plot", plot) == 0
    assert fio.load_map(out).is_identity()
    report = json.loads(rep.read_text())
    assert report["residuals"]["pushforward"] == 0.0 and report["ok"]
    head = plot.read_text().splitlines()[0]
    assert head == "x,y,dx,dy", f"plot header {head}"


def test_morph_bump_pair(tmp_path):
    d = build_domain(kind="torus", nodes=64)
    mu = DensityField.uniform(d)
    nu = DensityField(d, 1 + 0.2 * P.balanced(P.bump_at(d, [0.4, 0.5], 0.2), P.bump_at(d, [0.6, 0.5], 0.2)))
    fio.save_field(tmp_path / "mu.bin", mu)
    fio.save_field(tmp_path / "nu.bin", nu)
    rep = tmp_path / "r.json"
    code = run("morph", "--mu", tmp_path / "mu.bin", "--nu", tmp_path / "nu.bin",
               "--out", tmp_path / "psi.bin", "--report", rep)
    report = json.loads(rep.read_text())
    assert code == 0, f"report {report}"
    assert set(report["residuals"]) == {"pushforward", "mass_drift"}


def test_realize_rejects_unbalanced_charge(line_files, capsys):
    tmp, _, omega = line_files
    charge = tmp / "a.json"
    charge.write_text(json.dumps({"ends": {"e+": 1.0, "e-": 0.0}}))
    code = run("realize", "--omega", omega, "--charge", charge, "--depth", 2, "--out", tmp / "h.bin")
    err = capsys.readouterr().err
    assert code == 2 and "sum" in err, f"exit {code}: {err}"


def test_realize_then_endcharge(line_files):
    tmp, _, omega = line_files
    charge = tmp / "a.json"
    d = fio.load_field(omega).domain
    fio.save_charge(charge, EndCharge(d, {"e+": 1.5, "e-": -1.5}))
    rep1, rep2 = tmp / "r1.json", tmp / "r2.json"
    args = ["realize", "--omega", omega, "--charge", charge, "--depth", 2, "--out", tmp / "h.bin",
            "--path-samples", 2]
    assert run(*args, "--report", rep1) == 0
    assert run(*args, "--report", rep2) == 0
    r1, r2 = json.loads(rep1.read_text()), json.loads(rep2.read_text())
    r1.pop("timing"), r2.pop("timing")
    assert r1 == r2, "reports must be deterministic outside the timing section"
    out = tmp / "c.json"
    assert run("endcharge", "--omega", omega, "--map", tmp / "h.bin", "--out", out) == 0
    got = json.loads(out.read_text())["ends"]
    assert abs(got["e+"] - 1.5) <= 1e-6 and abs(got["e-"] + 1.5) <= 1e-6, f"charge {got}"


def test_matchforms_cli(tmp_path):
    d = P.line(T=10, nodes=513)
    mu = P.density(d, 1 + 0.3 * P.bump_at(d, [-1.5], 0.5))
    nu = P.density(d, 1 + 0.3 * P.bump_at(d, [1.5], 0.5))
    fio.save_field(tmp_path / "mu.bin", mu)
    fio.save_field(tmp_path / "nu.bin", nu)
    rep = tmp_path / "r.json"
    code = run("matchforms", "--mu", tmp_path / "mu.bin", "--nu", tmp_path / "nu.bin",
               "--depth", 2, "--out", tmp_path / "h.bin", "--report", rep)
    report = json.loads(rep.read_text())
    assert code == 0, f"report {report}"
    assert report["residuals"]["pushforward"] <= report["tolerances"]["pushforward"]
    assert len(report["inputs"]["mu"]) == 64


def test_matchforms_mismatched_ends_exit_2(tmp_path, capsys):
    d = P.line(T=10, nodes=257)
    fio.save_field(tmp_path / "mu.bin", DensityField.uniform(d))
    from artifact.fields import TailModel
    nu = DensityField(d, np.ones(d.node_shape),
                      {"e-": TailModel.constant(1.0), "e+": TailModel.decaying(2.0, 0.5)})
    fio.save_field(tmp_path / "nu.bin", nu)
    code = run("matchforms", "--mu", tmp_path / "mu.bin", "--nu", tmp_path / "nu.bin",
               "--out", tmp_path / "h.bin")
    assert code == 2 and "e+" in capsys.readouterr().err


def test_field_plot_columns(tmp_path):
    d = build_domain(kind="interval", nodes=32)
    fio.write_plot(tmp_path / "f.csv", DensityField.uniform(d, 2.0))
    rows = np.loadtxt(tmp_path / "f.csv", delimiter=",", skiprows=1)
    assert rows.shape == (32, 2) and np.all(rows[:, 1] == 2.0)
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "x,value"
    fio.write_plot(tmp_path / "m.csv", DiffeoMap.identity(d))
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "x,dx"


def test_verify_moser_suite_exit_0(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MT_SEED", "5")
    rep = tmp_path / "v.json"
    assert run("verify", "--suite", "j", "--report", rep) == 0
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert line["pass"] and line["seed"] == 5 and line["criteria"] == {"4": True}


def test_unknown_subcommand_exit_2():
    assert run("frobnicate") == 2
