"""Command line entry point: `artifact <subcommand> ...`.

Exit codes: 0 success, 2 precondition rejected (bad inputs or files),
1 numerical failure or a residual beyond its tolerance.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import io as fio
from . import profiles
from .domain import build_domain
from .ends import end_charge_of, preservation_budget, preservation_residual
from .errors import ArtifactError, FormatError, NumericalError, PreconditionError
from .fields import pushforward
from .moser import DEFAULT_STEPS, MoserProblem, moser_flow_solve
from .suites import SUITES, run_suite
from .transfer import match_volume_forms, realize_end_charge

EXIT_OK, EXIT_NUMERIC, EXIT_PRECONDITION = 0, 1, 2


class ResidualFailure(Exception):
    """A computation finished but a residual exceeded its tolerance."""


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _report(command, inputs, tolerances, residuals, flags, runtime_ms, extra=None) -> dict:
    rep = {
        "command": command,
        "inputs": {k: _sha256(v) for k, v in sorted(inputs.items())},
        "tolerances": tolerances,
        "residuals": residuals,
        "pass": flags,
        "ok": all(flags.values()),
        "timing": {"runtime_ms": runtime_ms},
    }
    if extra:
        rep["details"] = extra
    return rep


def _finish(rep: dict, report_path) -> None:
    if report_path:
        text = json.dumps(fio.to_jsonable(rep), indent=2, sort_keys=True)
        Path(report_path).write_text(text + "\n")
    if not rep["ok"]:
        bad = [k for k, v in rep["pass"].items() if not v]
        raise ResidualFailure(f"{rep['command']}: checks failed: {', '.join(bad)}")


def _within(residuals: dict, tolerances: dict) -> dict:
    return {k: bool(residuals[k] <= tolerances[k]) for k in tolerances}


@click.group()
def cli():
    """Volume forms, end charges and mass transfer on discretized model manifolds."""


@cli.command()
@click.option("--kind", required=True,
              type=click.Choice(["interval", "rectangle", "torus", "line", "half_line", "cylinder"]))
@click.option("--nodes", required=True, help="Node counts, e.g. 1024 or 32x256.")
@click.option("--truncation", type=float, default=None, help="Window half-length T for noncompact kinds.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def mkdomain(kind, nodes, truncation, out):
    """Write a domain description (JSON)."""
    try:
        counts = [int(n) for n in nodes.lower().split("x")]
    except ValueError:
        raise PreconditionError(f"cannot parse node counts {nodes!r}") from None
    spec = {"kind": kind, "nodes": counts[0] if len(counts) == 1 else counts}
    if truncation is not None:
        spec["truncation"] = truncation
    fio.save_domain(out, build_domain(spec))


@cli.command()
@click.option("--domain", "domain_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--profile", type=click.Choice(profiles.PROFILES), default="uniform")
@click.option("--rate", type=float, default=1.0)
@click.option("--amplitude", type=float, default=0.3)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--plot", type=click.Path(dir_okay=False), default=None)
def mkfield(domain_path, profile, rate, amplitude, seed, out, plot):
    """Write a density field built from a named profile."""
    d = fio.load_domain(domain_path)
    mu = profiles.field_profile(d, profile, seed=seed, rate=rate, amplitude=amplitude)
    fio.save_field(out, mu)
    if plot:
        fio.write_plot(plot, mu)


@cli.command()
@click.option("--mu", "mu_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--nu", "nu_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--collar", type=float, default=0.05)
@click.option("--steps", type=int, default=DEFAULT_STEPS)
@click.option("--report", type=click.Path(dir_okay=False), default=None)
@click.option("--plot", type=click.Path(dir_okay=False), default=None)
def morph(mu_path, nu_path, out, collar, steps, report, plot):
    """Moser map psi on a compact domain with psi_* mu = nu, identity near the boundary."""
    t0 = time.perf_counter()
    mu, nu = fio.load_field(mu_path), fio.load_field(nu_path)
    psi, _ = moser_flow_solve(MoserProblem(mu, nu, collar), steps=steps)
    fio.save_map(out, psi)
    pushed = pushforward(psi, mu)
    d = mu.domain
    res = {"pushforward": float(np.abs(pushed.samples - nu.samples).max()),
           "mass_drift": abs(float(pushed.cell_masses().sum() - mu.cell_masses().sum()))}
    # total mass under pushforward is only as good as the quadrature, so use the region-mass tolerance
    tol = {"pushforward": 50 * d.h ** 2, "mass_drift": 10 * d.h ** 2 * max(1.0, float(mu.cell_masses().sum()))}
    if plot:
        fio.write_plot(plot, psi)
    rep = _report("morph", {"mu": mu_path, "nu": nu_path}, tol, res, _within(res, tol),
                  1e3 * (time.perf_counter() - t0), {"identity": psi.is_identity()})
    _finish(rep, report)


@cli.command()
@click.option("--mu", "mu_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--nu", "nu_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--depth", type=int, default=2)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--steps", type=int, default=DEFAULT_STEPS)
@click.option("--report", type=click.Path(dir_okay=False), default=None)
@click.option("--plot", type=click.Path(dir_okay=False), default=None)
def matchforms(mu_path, nu_path, depth, out, steps, report, plot):
    """Diffeomorphism h with h_* mu = nu on a noncompact domain."""
    mu, nu = fio.load_field(mu_path), fio.load_field(nu_path)
    h, info = match_volume_forms(mu, nu, depth, steps=steps)
    fio.save_map(out, h)
    if plot:
        fio.write_plot(plot, h)
    tol = {"pushforward": info.get("tolerance", 50 * mu.domain.h ** 2)}
    res = {"pushforward": info["residual"]}
    extra = {k: v for k, v in info.items() if k not in ("residual", "tolerance", "runtime_ms")}
    rep = _report("matchforms", {"mu": mu_path, "nu": nu_path}, tol, res, _within(res, tol),
                  info["runtime_ms"], extra)
    _finish(rep, report)


@cli.command()
@click.option("--omega", "omega_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--map", "map_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--report", type=click.Path(dir_okay=False), default=None)
def endcharge(omega_path, map_path, out, report):
    """End charge of a map with respect to a volume form."""
    t0 = time.perf_counter()
    omega, h = fio.load_field(omega_path), fio.load_map(map_path)
    c = end_charge_of(h, omega)
    fio.save_charge(out, c)
    res = {"preservation": preservation_residual(h, omega), "charge_sum": abs(c.total())}
    tol = {"preservation": preservation_budget(omega), "charge_sum": 2 * preservation_budget(omega)}
    rep = _report("endcharge", {"omega": omega_path, "map": map_path}, tol, res, _within(res, tol),
                  1e3 * (time.perf_counter() - t0), {"charge": c.values})
    _finish(rep, report)


@cli.command()
@click.option("--omega", "omega_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--charge", "charge_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--depth", type=int, default=2)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--t", "t", type=float, default=1.0, help="Point on the section path, in [0, 1].")
@click.option("--path-samples", type=int, default=3)
@click.option("--no-repair", is_flag=True, default=False)
@click.option("--steps", type=int, default=DEFAULT_STEPS)
@click.option("--report", type=click.Path(dir_okay=False), default=None)
@click.option("--plot", type=click.Path(dir_okay=False), default=None)
def realize(omega_path, charge_path, depth, out, t, path_samples, no_repair, steps, report, plot):
    """Omega-preserving map realizing a prescribed end charge."""
    omega = fio.load_field(omega_path)
    a = fio.load_charge(charge_path, omega.domain)
    h, _, info = realize_end_charge(omega, a, depth, t=t, path_samples=path_samples,
                                    repair=not no_repair, steps=steps)
    fio.save_map(out, h)
    if plot:
        fio.write_plot(plot, h)
    res = {"charge": info["charge_error"], "preservation": info["preservation_residual"]}
    tol = {"charge": 1e-6, "preservation": info["preservation_budget"]}
    extra = {k: info[k] for k in ("target", "realized", "path_charges", "stages")}
    rep = _report("realize", {"omega": omega_path, "charge": charge_path}, tol, res,
                  _within(res, tol), info["runtime_ms"], extra)
    _finish(rep, report)


@cli.command()
@click.option("--suite", type=click.Choice(SUITES), default="all")
@click.option("--seed", type=int, default=None, help="Overrides MT_SEED.")
@click.option("--report", type=click.Path(dir_okay=False), default=None)
def verify(suite, seed, report):
    """Run invariant suites and print pass/fail JSON."""
    result = run_suite(suite, seed)
    res, tol, flags = {}, {}, {}
    for k, recs in result["criteria"].items():
        for r in recs:
            key = f"{k}: {r['name']}"
            res[key], tol[key], flags[key] = r["value"], r["tol"], r["pass"]
    rep = _report(f"verify --suite {suite}", {}, tol, res, flags, 1e3 * result["runtime_s"],
                  {"seed": result["seed"],
                   "criteria_pass": {k: all(r["pass"] for r in v)
                                     for k, v in result["criteria"].items()}})
    rep["timing"]["criteria_s"] = result["timing_s"]
    click.echo(json.dumps(fio.to_jsonable({"suite": suite, "seed": result["seed"],
                                           "pass": rep["ok"],
                                           "criteria": rep["details"]["criteria_pass"]}),
                          sort_keys=True))
    _finish(rep, report)


def main(argv=None) -> int:
    """Run the CLI and return its exit code instead of exiting."""
    try:
        cli.main(args=list(sys.argv[1:] if argv is None else argv), prog_name="artifact",
                 standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_PRECONDITION
    except click.exceptions.Abort:
        return EXIT_NUMERIC
    except FormatError as exc:
        where = ""
        if exc.field:
            where = f" (field {exc.field}"
            where += f", byte offset {exc.offset})" if exc.offset is not None else ")"
        click.echo(f"error: malformed input{where}: {exc}", err=True)
        return EXIT_PRECONDITION
    except PreconditionError as exc:
        click.echo(f"error: precondition rejected: {exc}", err=True)
        return EXIT_PRECONDITION
    except (ResidualFailure, NumericalError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_NUMERIC
    except ArtifactError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_NUMERIC
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_PRECONDITION
    return EXIT_OK


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
