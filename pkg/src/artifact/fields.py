"""Density fields, sampled diffeomorphisms, masses and the transfer functional J."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _interp
from .domain import Domain, Region
from .errors import (InfiniteSymmetricDifference, InvalidMap, NumericalError,
                     PreconditionError)

EDGE_RTOL = 1e-9


# ---------------------------------------------------------------------------
# tail models


@dataclass(frozen=True)
class TailModel:
    """Density beyond the truncation window, in the end's collar coordinate v = u - T >= 0.

    constant: column density ``rate`` (infinite end mass).
    decaying: column density (mass / cross) * decay * exp(-decay * v), total mass ``mass``.
    """

    kind: str
    rate: float = 0.0
    mass: float = 0.0
    decay: float = 0.0

    def __post_init__(self):
        if self.kind == "constant":
            if not self.rate > 0:
                raise PreconditionError(f"constant tail rate must be positive, got {self.rate}")
        elif self.kind == "decaying":
            if not (self.mass > 0 and self.decay > 0):
                raise PreconditionError(
                    f"decaying tail needs positive mass and decay, got {self.mass}, {self.decay}")
        else:
            raise PreconditionError(f"unknown tail kind {self.kind!r}")

    @classmethod
    def constant(cls, rate: float) -> "TailModel":
        return cls("constant", rate=float(rate))

    @classmethod
    def decaying(cls, mass: float, decay: float) -> "TailModel":
        return cls("decaying", mass=float(mass), decay=float(decay))

    @property
    def finite(self) -> bool:
        return self.kind == "decaying"

    def density(self, v, cross: float = 1.0):
        v = np.asarray(v, dtype=float)
        if self.kind == "constant":
            return np.full_like(v, self.rate)
        return (self.mass / cross) * self.decay * np.exp(-self.decay * v)

    def cumulative(self, v, cross: float = 1.0):
        """Column mass between the window edge and collar offset v (v may be +inf)."""
        v = np.asarray(v, dtype=float)
        if self.kind == "constant":
            return self.rate * v
        return (self.mass / cross) * -np.expm1(-self.decay * v)

    def total(self) -> float:
        return math.inf if self.kind == "constant" else self.mass

    def shifted(self, s: float) -> "TailModel":
        """Tail of the pushforward under a collar shift u -> u + s."""
        if self.kind == "constant" or s == 0:
            return self
        return TailModel.decaying(self.mass * math.exp(self.decay * s), self.decay)

    def to_json(self, end_id: str) -> dict:
        if self.kind == "constant":
            return {"end": end_id, "kind": "constant_rate", "rate": self.rate}
        return {"end": end_id, "kind": "decaying", "mass": self.mass, "decay": self.decay}

    @classmethod
    def from_json(cls, obj: dict) -> "TailModel":
        kind = obj.get("kind")
        if kind in ("constant", "constant_rate"):
            return cls.constant(obj["rate"])
        if kind == "decaying":
            return cls.decaying(obj["mass"], obj["decay"])
        raise PreconditionError(f"unknown tail kind {kind!r}")


# ---------------------------------------------------------------------------
# density fields


def _grid(d: Domain) -> list:
    return [(d.bounds[a][0], d.spacing(a), d.nodes[a], d.periodic[a]) for a in range(d.dim)]


@dataclass(frozen=True, eq=False)
class DensityField:
    domain: Domain
    samples: np.ndarray
    tails: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.domain
        s = np.array(self.samples, dtype=float)
        if s.shape != d.node_shape:
            raise PreconditionError(f"density samples shape {s.shape} != nodes {d.node_shape}")
        if not np.all(np.isfinite(s)):
            raise PreconditionError("density samples contain non-finite values")
        if s.min() <= 0:
            raise PreconditionError(f"density must be positive; min sample {s.min():.3e}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        tails = dict(self.tails)
        if set(tails) != set(d.end_ids):
            raise PreconditionError(
                f"tail models given for {sorted(tails)} but domain ends are {sorted(d.end_ids)}")
        object.__setattr__(self, "tails", tails)
        for e in d.ends:
            edge = np.take(s, -1 if e.sign > 0 else 0, axis=e.axis)
            want = float(tails[e.id].density(0.0, d.cross_measure))
            err = np.abs(edge - want).max()
            if err > EDGE_RTOL * max(abs(want), 1.0):
                raise PreconditionError(
                    f"window edge samples toward {e.id} differ from the tail model by {err:.3e}")

    @classmethod
    def uniform(cls, d: Domain, rate: float = 1.0) -> "DensityField":
        """Constant density with constant-rate tails (Lebesgue measure scaled by rate)."""
        tails = {e: TailModel.constant(rate) for e in d.end_ids}
        return cls(d, np.full(d.node_shape, float(rate)), tails)

    @classmethod
    def from_function(cls, d: Domain, fn, tails=None) -> "DensityField":
        grids = d.node_grid()
        return cls(d, np.asarray(fn(*grids), dtype=float) + np.zeros(d.node_shape), tails or {})

    def with_samples(self, samples) -> "DensityField":
        return DensityField(self.domain, samples, self.tails)

    def equals(self, other: "DensityField", rtol: float = 0.0) -> bool:
        if not self.domain.same_as(other.domain) or self.tails != other.tails:
            return False
        if rtol == 0.0:
            return bool(np.array_equal(self.samples, other.samples))
        return bool(np.all(np.abs(self.samples - other.samples)
                           <= rtol * np.abs(other.samples)))

    def cell_masses(self) -> np.ndarray:
        """Mass of every grid cell under the piecewise (bi)linear interpolant."""
        d = self.domain
        v = self.samples
        for a in range(d.dim):
            if d.periodic[a]:
                v = 0.5 * (v + np.roll(v, -1, axis=a))
            else:
                lo = np.take(v, np.arange(v.shape[a] - 1), axis=a)
                hi = np.take(v, np.arange(1, v.shape[a]), axis=a)
                v = 0.5 * (lo + hi)
        return v * d.cell_volume

    def evaluate(self, pts) -> np.ndarray:
        """Density at arbitrary points: cubic interpolation inside, tail model beyond the window."""
        d = self.domain
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if not d.noncompact:
            return _interp.cubic(self.samples, _grid(d), pts)
        ax = d.axial
        lo, hi = d.bounds[ax]
        u = pts[ax]
        inside = np.clip(u, lo, hi)
        q = pts.copy()
        q[ax] = inside
        out = _interp.cubic(self.samples, _grid(d), q)
        for e in d.ends:
            beyond = e.sign * u - (hi if e.sign > 0 else -lo)
            sel = beyond > 0
            if sel.any():
                out = np.where(sel, self.tails[e.id].density(np.maximum(beyond, 0.0),
                                                             d.cross_measure), out)
        return out


def finite_ends(mu: DensityField) -> frozenset:
    return frozenset(e for e, t in mu.tails.items() if t.finite)


# ---------------------------------------------------------------------------
# column interval sets (preimages of slabs)


def _iv_normalize(iv) -> np.ndarray:
    iv = np.asarray(iv, dtype=float).reshape(-1, 2)
    iv = iv[iv[:, 1] > iv[:, 0]]
    if iv.shape[0] == 0:
        return np.zeros((0, 2))
    iv = iv[np.argsort(iv[:, 0], kind="stable")]
    out = [list(iv[0])]
    for a, b in iv[1:]:
        if a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return np.array(out)


def _iv_intersect(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    out = []
    i = j = 0
    while i < len(A) and j < len(B):
        lo = max(A[i, 0], B[j, 0])
        hi = min(A[i, 1], B[j, 1])
        if hi > lo:
            out.append((lo, hi))
        if A[i, 1] < B[j, 1]:
            i += 1
        else:
            j += 1
    return np.array(out).reshape(-1, 2)


def _iv_diff(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    out = []
    for a, b in A:
        cur = a
        for c, e in B:
            if e <= cur or c >= b:
                continue
            if c > cur:
                out.append((cur, c))
            cur = max(cur, e)
            if cur >= b:
                break
        if cur < b:
            out.append((cur, b))
    return np.array(out).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class ColumnSet:
    """A set described by axial interval lists on each transverse node column."""

    domain: Domain
    columns: tuple

    @classmethod
    def from_region(cls, R: Region) -> "ColumnSet":
        d = R.domain
        iv = _iv_normalize(R.axial_intervals()) if R.mask.any() or R.tails else np.zeros((0, 2))
        ncol = 1 if d.dim == 1 else d.nodes[0]
        return cls(d, tuple(iv for _ in range(ncol)))

    def _binary(self, other: "ColumnSet", fn) -> "ColumnSet":
        self.domain.require_same(other.domain)
        return ColumnSet(self.domain, tuple(fn(a, b) for a, b in zip(self.columns, other.columns)))

    def __sub__(self, other):
        return self._binary(other, _iv_diff)

    def __and__(self, other):
        return self._binary(other, _iv_intersect)


def _as_columns(X) -> ColumnSet:
    return X if isinstance(X, ColumnSet) else ColumnSet.from_region(X)


def _column_cumulative(mu: DensityField, col: int, x: np.ndarray) -> np.ndarray:
    """Exact mass of the axial column (piecewise linear density) from the lower window edge to x."""
    d = mu.domain
    ax = d.axial
    rho = mu.samples if d.dim == 1 else mu.samples[col]
    xs = d.coords(ax)
    h = d.spacing(ax)
    x = np.asarray(x, dtype=float)
    if d.periodic[ax]:
        rr = np.append(rho, rho[0])
        cells = 0.5 * (rr[:-1] + rr[1:]) * h
        C = np.concatenate([[0.0], np.cumsum(cells)])
        total = C[-1]
        P = d.period(ax)
        k = np.floor((x - xs[0]) / P)
        r = x - xs[0] - k * P
        i = np.clip(np.floor(r / h).astype(int), 0, len(rho) - 1)
        t = r / h - i
        val = C[i] + h * (rr[i] * t + 0.5 * (rr[i + 1] - rr[i]) * t * t)
        return k * total + val
    cells = 0.5 * (rho[:-1] + rho[1:]) * h
    C = np.concatenate([[0.0], np.cumsum(cells)])
    lo, hi = xs[0], xs[-1]
    xc = np.clip(x, lo, hi)
    i = np.clip(np.floor((xc - lo) / h).astype(int), 0, len(rho) - 2)
    t = (xc - xs[i]) / h
    out = C[i] + h * (rho[i] * t + 0.5 * (rho[i + 1] - rho[i]) * t * t)
    cross = d.cross_measure
    for e in d.ends:
        tail = mu.tails[e.id]
        if e.sign > 0:
            sel = x > hi
            if sel.any():
                with np.errstate(invalid="ignore"):
                    out = np.where(sel, C[-1] + tail.cumulative(np.where(sel, x - hi, 0.0), cross), out)
        else:
            sel = x < lo
            if sel.any():
                with np.errstate(invalid="ignore"):
                    out = np.where(sel, -tail.cumulative(np.where(sel, lo - x, 0.0), cross), out)
    return out


def _columns_mass(mu: DensityField, S: ColumnSet) -> float:
    d = mu.domain
    w = d.column_weights()
    total = 0.0
    for c, iv in enumerate(S.columns):
        if iv.shape[0] == 0:
            continue
        phi = _column_cumulative(mu, c, iv.ravel()).reshape(-1, 2)
        with np.errstate(invalid="ignore"):
            part = float(np.sum(phi[:, 1] - phi[:, 0]))
        if math.isinf(part) or math.isnan(part):
            return math.inf
        total += w[c] * part
    return total


def mass(mu: DensityField, R) -> float:
    """mu(R) for a Region (cell quadrature plus analytic tails) or a ColumnSet."""
    mu.domain.require_same(R.domain)
    if isinstance(R, ColumnSet):
        return _columns_mass(mu, R)
    total = float(mu.cell_masses()[R.mask].sum())
    for e in R.tails:
        total += mu.tails[e].total()
    return total


def j_transfer(mu: DensityField, A, B) -> float:
    """J(A, B) = mu(A - B) - mu(B - A); raises when A and B differ by infinite mass."""
    if isinstance(A, Region) and isinstance(B, Region):
        A.domain.require_same(B.domain)
        ab, ba = mass(mu, A - B), mass(mu, B - A)
    else:
        Ac, Bc = _as_columns(A), _as_columns(B)
        ab, ba = mass(mu, Ac - Bc), mass(mu, Bc - Ac)
    if math.isinf(ab) or math.isinf(ba):
        raise InfiniteSymmetricDifference(
            f"symmetric difference has infinite mass (A-B: {ab}, B-A: {ba})")
    return ab - ba


# ---------------------------------------------------------------------------
# diffeomorphisms


@dataclass(frozen=True, eq=False)
class DiffeoMap:
    """Sampled map x -> x + disp(x); beyond the window a collar shift per end.

    ``disp`` has shape (dim, *nodes).  ``shifts[e]`` is the translation in the
    end's collar coordinate, so the coordinate displacement at that edge is sign * s.
    """

    domain: Domain
    disp: np.ndarray
    shifts: dict = field(default_factory=dict)
    min_jacobian: float = field(default=1.0, compare=False)

    def __post_init__(self):
        d = self.domain
        disp = np.array(self.disp, dtype=float)
        if disp.shape != (d.dim,) + d.node_shape:
            raise PreconditionError(f"displacement shape {disp.shape} != {(d.dim,) + d.node_shape}")
        if not np.all(np.isfinite(disp)):
            raise InvalidMap("map samples contain non-finite values")
        disp.setflags(write=False)
        object.__setattr__(self, "disp", disp)
        shifts = {e: float(self.shifts.get(e, 0.0)) for e in d.end_ids}
        unknown = set(self.shifts) - set(d.end_ids)
        if unknown:
            raise PreconditionError(f"shifts given for unknown ends {sorted(unknown)}")
        object.__setattr__(self, "shifts", shifts)
        object.__setattr__(self, "min_jacobian", self._validate())

    def _validate(self) -> float:
        d = self.domain
        disp = self.disp
        for a in range(d.dim):
            if d.periodic[a]:
                continue
            for side, idx in ((-1, 0), (1, -1)):
                end = [e for e in d.ends if e.axis == a and e.sign == side]
                layer = np.take(disp, idx, axis=1 + a)
                if end:
                    s = self.shifts[end[0].id]
                    want = np.zeros_like(layer)
                    want[a] = side * s
                    if np.abs(layer - want).max() > 1e-9 * (1 + abs(s)):
                        raise InvalidMap(f"edge displacement toward {end[0].id} is not the shift {s}")
                elif np.abs(layer).max() > 1e-12:
                    raise InvalidMap(f"boundary nodes on axis {a} side {side} are not fixed")
        if d.dim == 1:
            v = d.coords(0) + disp[0]
            if d.periodic[0]:
                v = np.append(v, v[0] + d.period(0))
            dv = np.diff(v)
            if dv.min() <= 0:
                raise InvalidMap(f"1D map not strictly increasing at node {int(np.argmin(dv))}")
            return float(dv.min() / d.spacing(0))
        det = jacobian_det(self)
        if det.min() <= 0:
            node = np.unravel_index(int(np.argmin(det)), det.shape)
            raise InvalidMap(f"Jacobian determinant {det.min():.3e} <= 0 at node {node}")
        return float(det.min())

    @classmethod
    def identity(cls, d: Domain) -> "DiffeoMap":
        return cls(d, np.zeros((d.dim,) + d.node_shape))

    @classmethod
    def from_values(cls, d: Domain, values, shifts=None) -> "DiffeoMap":
        """Build from node images (dim, *nodes) (1D: a flat array of node images)."""
        values = np.asarray(values, dtype=float)
        if d.dim == 1 and values.ndim == 1:
            values = values[None]
        grids = np.stack(d.node_grid())
        return cls(d, values - grids, shifts or {})

    @property
    def values(self) -> np.ndarray:
        return np.stack(self.domain.node_grid()) + self.disp

    def is_identity(self) -> bool:
        return not self.disp.any() and not any(self.shifts.values())

    def is_axial(self) -> bool:
        return self.domain.dim == 1 or not self.disp[0].any()

    def _clamped(self, pts):
        d = self.domain
        q = np.array(pts, dtype=float)
        inside = np.ones(q.shape[1], bool)
        for a in range(d.dim):
            if not d.periodic[a]:
                lo, hi = d.bounds[a]
                inside &= (q[a] >= lo) & (q[a] <= hi)
                q[a] = np.clip(q[a], lo, hi)
        return q, inside

    def displacement_at(self, pts) -> np.ndarray:
        d = self.domain
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        q, _ = self._clamped(pts)
        return _interp.linear(self.disp, _grid(d), q)

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts + self.displacement_at(pts)

    def jacobian_at(self, pts) -> np.ndarray:
        """Jacobian of the interpolated map, shape (dim, dim, m)."""
        d = self.domain
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        q, _ = self._clamped(pts)
        g = _interp.linear_gradient(self.disp, _grid(d), q)  # (dim_deriv, dim_comp, m)
        J = np.transpose(g, (1, 0, 2)).copy()
        for a in range(d.dim):
            if not d.periodic[a]:
                lo, hi = d.bounds[a]
                out = (pts[a] < lo) | (pts[a] > hi)
                J[:, a, out] = 0.0
        for a in range(d.dim):
            J[a, a] += 1.0
        return J


def jacobian_det(h: DiffeoMap) -> np.ndarray:
    """Finite-difference Jacobian determinant at every node."""
    d = h.domain
    grads = [_interp.gradient(h.disp[c], _grid(d)) for c in range(d.dim)]
    if d.dim == 1:
        return 1.0 + grads[0][0]
    a, b = 1.0 + grads[0][0], grads[0][1]
    c, e = grads[1][0], 1.0 + grads[1][1]
    return a * e - b * c


def compose(h: DiffeoMap, g: DiffeoMap) -> DiffeoMap:
    """h o g sampled on the grid."""
    h.domain.require_same(g.domain)
    if h.is_identity():
        return g
    if g.is_identity():
        return h
    d = h.domain
    pts = g.values.reshape(d.dim, -1)
    disp = g.disp + h.displacement_at(pts).reshape(g.disp.shape)
    shifts = {e: h.shifts[e] + g.shifts[e] for e in d.end_ids}
    return DiffeoMap(d, disp, shifts)


def compose_all(*maps: DiffeoMap) -> DiffeoMap:
    """compose_all(a, b, c) = a o b o c."""
    out = maps[-1]
    for m in reversed(maps[:-1]):
        out = compose(m, out)
    return out


def _invert_1d(h: DiffeoMap, x: np.ndarray) -> np.ndarray:
    d = h.domain
    xs = d.coords(0)
    v = xs + h.disp[0]
    if d.periodic[0]:
        P = d.period(0)
        vv = np.concatenate([v - P, v, v + P, [v[0] + 2 * P]])
        xx = np.concatenate([xs - P, xs, xs + P, [xs[0] + 2 * P]])
        k = np.floor((x - v[0]) / P)
        r = x - k * P
        return np.interp(r, vv, xx) + k * P
    y = np.interp(x, v, xs)
    y = np.where(x < v[0], x - h.disp[0][0], y)
    y = np.where(x > v[-1], x - h.disp[0][-1], y)
    return y


def inverse_points(h: DiffeoMap, x, max_iter: int = 50) -> np.ndarray:
    """Solve h(y) = x for arbitrary points x of shape (dim, m)."""
    d = h.domain
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if h.is_identity():
        return x.copy()
    if d.dim == 1:
        return _invert_1d(h, x[0])[None]
    y = x - h.displacement_at(x)
    P = np.array([d.period(a) if d.periodic[a] else 0.0 for a in range(d.dim)])
    scale = 1e-13 * (1.0 + np.abs(x).max())

    def residual(y, sel=slice(None)):
        r = h(y) - x[:, sel]
        for a in range(d.dim):
            if d.periodic[a]:
                r[a] = r[a] - P[a] * np.round(r[a] / P[a])
        return r

    r = residual(y)
    for _ in range(max_iter):
        err = np.abs(r).max(axis=0)
        active = err > scale
        if not active.any():
            return y
        J = h.jacobian_at(y[:, active])
        a, b, c, e = J[0, 0], J[0, 1], J[1, 0], J[1, 1]
        det = a * e - b * c
        ra, rb = r[0, active], r[1, active]
        step = np.stack([(e * ra - b * rb) / det, (-c * ra + a * rb) / det])
        alpha = np.ones(step.shape[1])
        ya = y[:, active]
        for _ in range(30):
            trial = ya - alpha * step
            rt = residual(trial, active)
            worse = np.abs(rt).max(axis=0) >= err[active]
            if not worse.any():
                break
            alpha = np.where(worse, 0.5 * alpha, alpha)
        y[:, active] = ya - alpha * step
        r = residual(y)
    err = np.abs(r).max(axis=0)
    bad = int(np.argmax(err))
    raise NumericalError(
        f"Newton inversion did not converge at point {x[:, bad].tolist()} (residual {err[bad]:.3e})")


def invert(h: DiffeoMap) -> DiffeoMap:
    d = h.domain
    if h.is_identity():
        return h
    grid = np.stack(d.node_grid()).reshape(d.dim, -1)
    try:
        y = inverse_points(h, grid)
    except NumericalError as exc:
        raise NumericalError(f"inversion failed: {exc}") from None
    disp = (y - grid).reshape((d.dim,) + d.node_shape)
    for e in d.ends:
        edge = [slice(None)] * (d.dim + 1)
        edge[1 + e.axis] = -1 if e.sign > 0 else 0
        layer = np.zeros_like(disp[tuple(edge)])
        layer[e.axis] = -e.sign * h.shifts[e.id]
        disp[tuple(edge)] = layer
    for a in range(d.dim):
        if d.periodic[a]:
            continue
        for side, idx in ((-1, 0), (1, -1)):
            if not any(e.axis == a and e.sign == side for e in d.ends):
                edge = [slice(None)] * (d.dim + 1)
                edge[1 + a] = idx
                disp[tuple(edge)] = 0.0
    return DiffeoMap(d, disp, {e: -s for e, s in h.shifts.items()})


def _smooth_disp(h: DiffeoMap, pts: np.ndarray, spline) -> np.ndarray:
    """Spline displacement; clamped along end axes (shift beyond the window), while
    compact axes may be probed slightly outside through the spline's edge reflection."""
    d = h.domain
    q = np.array(pts, dtype=float)
    for a in range(d.dim):
        if d.periodic[a]:
            continue
        lo, hi = d.bounds[a]
        pad = 4 * d.spacing(a)
        lo_end = any(e.axis == a and e.sign < 0 for e in d.ends)
        hi_end = any(e.axis == a and e.sign > 0 for e in d.ends)
        q[a] = np.clip(q[a], lo if lo_end else lo - pad, hi if hi_end else hi + pad)
    return spline(q)


def smooth_inverse(h: DiffeoMap, y: np.ndarray, max_iter: int = 20):
    """Invert the cubic spline interpolant of h at points y.

    Returns (z, det) with h(z) = y and det the Jacobian determinant of the
    interpolant at z (centered differences on the displacement).
    """
    d = h.domain
    grid = _grid(d)
    padded = _interp.Spline(h.disp, grid)
    delta = [1e-2 * d.spacing(a) for a in range(d.dim)]
    P = [d.period(a) if d.periodic[a] else 0.0 for a in range(d.dim)]

    def jac(z):
        J = np.zeros((d.dim, d.dim, z.shape[1]))
        for a in range(d.dim):
            step = np.zeros((d.dim, 1))
            step[a] = delta[a]
            diff = _smooth_disp(h, z + step, padded) - _smooth_disp(h, z - step, padded)
            J[:, a] = diff / (2 * delta[a])
            J[a, a] += 1.0
        return J

    def residual(z):
        r = z + _smooth_disp(h, z, padded) - y
        for a in range(d.dim):
            if d.periodic[a]:
                r[a] -= P[a] * np.round(r[a] / P[a])
        return r

    z = inverse_points(h, y)
    scale = 1e-14 * (1.0 + np.abs(y).max())
    for _ in range(max_iter):
        r = residual(z)
        if np.abs(r).max() <= scale:
            break
        J = jac(z)
        if d.dim == 1:
            z = z - r / J[0, 0]
        else:
            a, b, c, e = J[0, 0], J[0, 1], J[1, 0], J[1, 1]
            det = a * e - b * c
            z = z - np.stack([(e * r[0] - b * r[1]) / det, (-c * r[0] + a * r[1]) / det])
    J = jac(z)
    det = J[0, 0] if d.dim == 1 else J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    return z, det


def pushforward(h: DiffeoMap, mu: DensityField) -> DensityField:
    """h_* mu: density rho(h^-1 y) / det Dh(h^-1 y) with shifted tails."""
    h.domain.require_same(mu.domain)
    if h.is_identity():
        return mu
    d = h.domain
    y = np.stack(d.node_grid()).reshape(d.dim, -1)
    z, det = smooth_inverse(h, y)
    if det.min() <= 0:
        raise NumericalError(f"map interpolant folds (Jacobian {det.min():.3e})")
    out = (mu.evaluate(z) / det).reshape(d.node_shape)
    tails = {}
    for e in d.ends:
        tails[e.id] = mu.tails[e.id].shifted(h.shifts[e.id])
        edge = [slice(None)] * d.dim
        edge[e.axis] = -1 if e.sign > 0 else 0
        out[tuple(edge)] = tails[e.id].density(0.0, d.cross_measure)
    if out.min() <= 0:
        raise NumericalError(f"pushforward density lost positivity (min {out.min():.3e})")
    return DensityField(d, out, tails)


def _ray_nonneg(x0, f0, slope, direction):
    """Subset of the ray {x0 + direction * r, r >= 0} where f0 + slope * (x - x0) >= 0."""
    if direction > 0:
        if slope > 0:
            return (x0 if f0 >= 0 else x0 - f0 / slope, math.inf)
        if f0 < 0:
            return None
        return (x0, x0 - f0 / slope)
    if slope < 0:
        return (-math.inf, x0 if f0 >= 0 else x0 - f0 / slope)
    if f0 < 0:
        return None
    return (x0 - f0 / slope, x0)


def nonneg_set(x: np.ndarray, f: np.ndarray, left_slope=None, right_slope=None) -> np.ndarray:
    """Intervals where a piecewise linear function (nodes x, values f) is >= 0.

    Optional slopes extend f linearly beyond the first/last node.
    """
    f0, f1 = f[:-1], f[1:]
    x0, x1 = x[:-1], x[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = x0 + (-f0) / (f1 - f0) * (x1 - x0)
    lo = np.where(f0 >= 0, x0, r)
    hi = np.where(f1 >= 0, x1, r)
    keep = ((f0 >= 0) | (f1 >= 0)) & (hi > lo)
    pieces = list(zip(lo[keep], hi[keep]))
    if left_slope is not None:
        ray = _ray_nonneg(x[0], f[0], left_slope, -1)
        if ray is not None and ray[1] > ray[0]:
            pieces.insert(0, ray)
    if right_slope is not None:
        ray = _ray_nonneg(x[-1], f[-1], right_slope, 1)
        if ray is not None and ray[1] > ray[0]:
            pieces.append(ray)
    return _iv_normalize(pieces) if pieces else np.zeros((0, 2))


def preimage(h: DiffeoMap, X: Region):
    """h^{-1}(X) for a cell region; slabs map to a ColumnSet, identity returns X itself."""
    h.domain.require_same(X.domain)
    if h.is_identity():
        return X
    d = h.domain
    ax = d.axial
    if d.periodic[ax]:
        raise PreconditionError("preimages are only supported along a non-periodic axial axis")
    if not X.is_slab():
        raise PreconditionError("preimages of non-slab regions are not supported in 2D")
    targets = _iv_normalize(X.axial_intervals()) if (X.mask.any() or X.tails) else np.zeros((0, 2))
    if d.dim == 1:
        ends = np.asarray(targets, dtype=float).ravel()
        iv = _invert_1d(h, ends).reshape(-1, 2) if ends.size else np.zeros((0, 2))
        return ColumnSet(d, (_iv_normalize(iv),))
    xs = d.coords(ax)
    has_lo = any(e.sign < 0 for e in d.ends)
    has_hi = any(e.sign > 0 for e in d.ends)
    cols = []
    vals = xs[None, :] + h.disp[ax]
    uniform = bool((vals == vals[:1]).all())
    for c in range(d.nodes[0]):
        if uniform and cols:
            cols.append(cols[0])
            continue
        g = vals[c]
        acc = []
        for a, b in targets:
            lower = (np.array([[-math.inf, math.inf]]) if a == -math.inf else
                     nonneg_set(xs, g - a, 1.0 if has_lo else None, 1.0 if has_hi else None))
            upper = (np.array([[-math.inf, math.inf]]) if b == math.inf else
                     nonneg_set(xs, b - g, -1.0 if has_lo else None, -1.0 if has_hi else None))
            if not has_lo:
                lower = _iv_intersect(lower, np.array([[xs[0], math.inf]]))
            if not has_hi:
                lower = _iv_intersect(lower, np.array([[-math.inf, xs[-1]]]))
            acc.extend(_iv_intersect(lower, upper).tolist())
        cols.append(_iv_normalize(acc) if acc else np.zeros((0, 2)))
    return ColumnSet(d, tuple(cols))


def region_after(h: DiffeoMap, X: Region):
    """h(X) = (h^{-1})^{-1}(X)."""
    return preimage(invert(h), X)


# ---------------------------------------------------------------------------
# isotopy paths


@dataclass(frozen=True, eq=False)
class IsotopyPath:
    times: tuple
    maps: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.maps) or len(t) < 2:
            raise PreconditionError("isotopy path needs matching times and maps (at least two)")
        if t[0] != 0.0 or not self.maps[0].is_identity():
            raise PreconditionError("isotopy path must start at t = 0 with the identity")
        if np.any(np.diff(t) <= 0) or t[-1] != 1.0:
            raise PreconditionError("isotopy times must increase strictly to 1")

    @property
    def final(self) -> DiffeoMap:
        return self.maps[-1]

    @classmethod
    def trivial(cls, d: Domain) -> "IsotopyPath":
        ident = DiffeoMap.identity(d)
        return cls((0.0, 1.0), (ident, ident))
