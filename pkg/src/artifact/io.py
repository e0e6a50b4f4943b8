"""Self-describing files: one JSON header line followed by a little-endian float64 payload.

Header keys: format, role ("density" or "map"), domain, tails (densities),
shifts (maps), data {dtype, shape, nbytes}.  Charges and domains are plain JSON.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .domain import Domain, build_domain
from .ends import EndCharge
from .errors import FormatError, PreconditionError
from .fields import DensityField, DiffeoMap, TailModel

FORMAT = "artifact/1"
DTYPE = "<f8"


def _header_bytes(header: dict) -> bytes:
    return (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")


def _write(path, header: dict, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=DTYPE)
    header = dict(header, format=FORMAT,
                  data={"dtype": DTYPE, "shape": list(arr.shape), "nbytes": arr.nbytes})
    with open(path, "wb") as fh:
        fh.write(_header_bytes(header))
        fh.write(arr.tobytes())


def _read(path) -> tuple:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("missing header terminator", field="header", offset=len(raw))
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", None) or getattr(exc, "start", 0)
        raise FormatError(f"header is not valid JSON: {exc}", field="header", offset=pos) from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object", field="header", offset=0)
    if header.get("format") != FORMAT:
        raise FormatError(f"unsupported format {header.get('format')!r}", field="format")
    data = header.get("data")
    if not isinstance(data, dict):
        raise FormatError("missing data descriptor", field="data")
    if data.get("dtype") != DTYPE:
        raise FormatError(f"payload dtype must be {DTYPE}", field="data.dtype")
    shape = data.get("shape")
    if not (isinstance(shape, list) and all(isinstance(n, int) and n >= 0 for n in shape)):
        raise FormatError("payload shape must be a list of sizes", field="data.shape")
    start = nl + 1
    want = int(np.prod(shape)) * 8 if shape else 8
    if data.get("nbytes") != want:
        raise FormatError(f"nbytes {data.get('nbytes')} does not match shape {shape}",
                          field="data.nbytes")
    have = len(raw) - start
    if have != want:
        raise FormatError(f"payload has {have} bytes, expected {want}", field="data",
                          offset=start + min(have, want))
    arr = np.frombuffer(raw, dtype=DTYPE, count=want // 8, offset=start).reshape(shape)
    bad = np.flatnonzero(~np.isfinite(arr.ravel()))
    if bad.size:
        raise FormatError("payload contains a non-finite value", field="data",
                          offset=start + 8 * int(bad[0]))
    return header, arr.astype(float), start


def _domain_from(header: dict) -> Domain:
    spec = header.get("domain")
    if not isinstance(spec, dict):
        raise FormatError("missing domain", field="domain")
    try:
        return build_domain(spec)
    except PreconditionError as exc:
        raise FormatError(f"invalid domain: {exc}", field="domain") from None


def save_field(path, mu: DensityField) -> None:
    tails = [mu.tails[e].to_json(e) for e in mu.domain.end_ids]
    _write(path, {"role": "density", "domain": mu.domain.to_spec(), "tails": tails}, mu.samples)


def save_map(path, h: DiffeoMap) -> None:
    _write(path, {"role": "map", "domain": h.domain.to_spec(), "shifts": h.shifts}, h.disp)


def load(path):
    """Load a density or a map, whichever the header declares."""
    header, arr, start = _read(path)
    d = _domain_from(header)
    role = header.get("role")
    try:
        if role == "density":
            tails = {}
            for i, t in enumerate(header.get("tails", [])):
                if not isinstance(t, dict) or "end" not in t:
                    raise FormatError("tail entry needs an 'end' key", field=f"tails[{i}]")
                tails[t["end"]] = TailModel.from_json(t)
            return DensityField(d, arr, tails)
        if role == "map":
            shifts = header.get("shifts", {})
            if not isinstance(shifts, dict):
                raise FormatError("shifts must be an object", field="shifts")
            return DiffeoMap(d, arr, shifts)
    except FormatError:
        raise
    except (PreconditionError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid {role} content: {exc}", field=role, offset=start) from None
    raise FormatError(f"unknown role {role!r}", field="role")


def load_field(path) -> DensityField:
    obj = load(path)
    if not isinstance(obj, DensityField):
        raise FormatError("file holds a map, expected a density", field="role")
    return obj


def load_map(path) -> DiffeoMap:
    obj = load(path)
    if not isinstance(obj, DiffeoMap):
        raise FormatError("file holds a density, expected a map", field="role")
    return obj


def save_charge(path, c: EndCharge) -> None:
    Path(path).write_text(json.dumps(c.to_json(), indent=2, sort_keys=True) + "\n")


def load_charge(path, d: Domain) -> EndCharge:
    return EndCharge.from_json(d, Path(path).read_text())


def save_domain(path, d: Domain) -> None:
    Path(path).write_text(json.dumps(d.to_spec(), indent=2) + "\n")


def load_domain(path) -> Domain:
    text = Path(path).read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"domain file is not JSON: {exc.msg}", field="domain",
                          offset=exc.pos) from None
    if not isinstance(spec, dict):
        raise FormatError("domain file must hold an object", field="domain")
    return build_domain(spec)


def plot_rows(obj) -> tuple:
    """CSV header and rows: (x[, y], value) for densities, (x[, y], dx[, dy]) for maps."""
    d = obj.domain
    names = ["x", "y"][:d.dim]
    coords = [g.ravel() for g in d.node_grid()]
    if isinstance(obj, DensityField):
        cols = coords + [obj.samples.ravel()]
        head = names + ["value"]
    else:
        cols = coords + [obj.disp[a].ravel() for a in range(d.dim)]
        head = names + ["d" + n for n in names]
    return head, np.stack(cols, axis=1)


def write_plot(path, obj) -> None:
    head, rows = plot_rows(obj)
    np.savetxt(path, rows, delimiter=",", header=",".join(head), comments="", fmt="%.17g")


def to_jsonable(x):
    """Recursively convert numpy scalars/arrays and non-finite floats for json.dumps."""
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return to_jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    return x
