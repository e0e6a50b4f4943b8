"""End charges: per-end signed values and the charge carried by a diffeomorphism."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .domain import Domain, representative_region, slab
from .errors import FormatError, InfiniteSymmetricDifference, PreconditionError
from .fields import DensityField, DiffeoMap, finite_ends, j_transfer, preimage, pushforward

CHARGE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class EndCharge:
    """A finitely additive signed measure on the (finite) set of ends."""

    domain: Domain
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = set(self.domain.end_ids)
        unknown = set(self.values) - ids
        if unknown:
            raise PreconditionError(f"charge given for unknown ends {sorted(unknown)}")
        vals = {e: float(self.values.get(e, 0.0)) for e in self.domain.end_ids}
        bad = [e for e, v in vals.items() if not math.isfinite(v)]
        if bad:
            raise PreconditionError(f"charge values must be finite; bad ends {bad}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def zero(cls, d: Domain) -> "EndCharge":
        return cls(d, {})

    def __getitem__(self, end_id: str) -> float:
        return self.values[end_id]

    def value(self, F) -> float:
        """Charge of a set of ends (sum of the per-end values)."""
        return float(sum(self.values[e] for e in F))

    def total(self) -> float:
        return self.value(self.domain.end_ids)

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.values.values())

    def as_vector(self) -> np.ndarray:
        return np.array([self.values[e] for e in self.domain.end_ids])

    def to_json(self) -> dict:
        return {"ends": dict(self.values)}

    @classmethod
    def from_json(cls, d: Domain, obj) -> "EndCharge":
        if isinstance(obj, (str, bytes)):
            try:
                obj = json.loads(obj)
            except json.JSONDecodeError as exc:
                raise FormatError(f"charge file is not JSON: {exc.msg}", offset=exc.pos) from None
        if not isinstance(obj, dict) or not isinstance(obj.get("ends"), dict):
            raise FormatError("charge file needs an object under 'ends'", field="ends")
        vals = {}
        for k, v in obj["ends"].items():
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise FormatError(f"charge for end {k!r} is not a number", field=f"ends.{k}")
            vals[k] = float(v)
        return cls(d, vals)


def validate_charge(c: EndCharge, omega: DensityField):
    """Check membership in the charges admissible for omega; returns (ok, violations)."""
    c.domain.require_same(omega.domain)
    report = []
    total = c.total()
    if abs(total) > CHARGE_TOL:
        report.append(f"sum != 0: charges sum to {total:.6g}")
    for e in sorted(finite_ends(omega)):
        if abs(c[e]) > CHARGE_TOL:
            report.append(f"end {e} has finite mass but charge {c[e]:.6g}")
    return not report, report


def charge_linear(a: EndCharge, b: EndCharge, s: float, t: float) -> EndCharge:
    a.domain.require_same(b.domain)
    return EndCharge(a.domain, {e: s * a[e] + t * b[e] for e in a.domain.end_ids})


def end_region(d: Domain, end_id: str, offset: float = 0.0):
    """Canonical collar region of one end, optionally started further out by offset."""
    if offset == 0.0:
        return representative_region(d, {end_id})
    e = d.end(end_id)
    start = e.collar_start + offset
    if start >= d.truncation:
        raise PreconditionError(f"representative offset {offset} leaves the window")
    return slab(d, start, math.inf) if e.sign > 0 else slab(d, -math.inf, -start)


def end_charge_of(h: DiffeoMap, omega: DensityField, offset: float = 0.0) -> EndCharge:
    """Mass moved toward each end: J(h^-1(C_e), C_e) over a representative C_e."""
    h.domain.require_same(omega.domain)
    d = h.domain
    if h.is_identity():
        return EndCharge.zero(d)
    vals = {}
    for e in d.end_ids:
        C = end_region(d, e, offset)
        try:
            vals[e] = j_transfer(omega, preimage(h, C), C)
        except InfiniteSymmetricDifference as exc:
            raise AssertionError(f"admissible maps move finite mass; end {e}: {exc}") from None
    return EndCharge(d, vals)


def preservation_budget(omega: DensityField) -> float:
    """Allowed sup deviation |h_* omega - omega| for a map to count as preserving omega."""
    d = omega.domain
    return 10.0 * d.h ** 2 * float(np.abs(omega.samples).max())


def preservation_residual(h: DiffeoMap, omega: DensityField) -> float:
    if h.is_identity():
        return 0.0
    return float(np.abs(pushforward(h, omega).samples - omega.samples).max())
