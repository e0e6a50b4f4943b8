"""Volume-form equalization: Poincare primitive, Moser flow, collar normalization,
1D cumulative transport and block-wise matching over an exhaustion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _interp
from .domain import Domain, Exhaustion, Region
from .errors import MassMismatch, NumericalError, PreconditionError
from .fields import DensityField, DiffeoMap, IsotopyPath, compose, compose_all, pushforward, mass

EQUAL_RTOL = 1e-12
DEFAULT_STEPS = 64
RETRY_STEPS = 256


# ---------------------------------------------------------------------------
# boxes and quadrature helpers


@dataclass(frozen=True, eq=False)
class Box:
    """Tensor grid of nodes; periodic axes close up after the last node."""

    coords: tuple
    periodic: tuple

    @classmethod
    def from_domain(cls, d: Domain) -> "Box":
        return cls(tuple(d.coords(a) for a in range(d.dim)), tuple(d.periodic))

    @property
    def dim(self) -> int:
        return len(self.coords)

    @property
    def shape(self) -> tuple:
        return tuple(len(c) for c in self.coords)

    def spacing(self, a: int) -> float:
        c = self.coords[a]
        return float(c[1] - c[0])

    @property
    def grid(self) -> list:
        return [(float(c[0]), self.spacing(a), len(c), self.periodic[a])
                for a, c in enumerate(self.coords)]

    def weights(self, a: int) -> np.ndarray:
        h = self.spacing(a)
        w = np.full(len(self.coords[a]), h)
        if not self.periodic[a]:
            w[0] = w[-1] = 0.5 * h
        return w

    def integrate(self, f: np.ndarray) -> float:
        out = f
        for a in reversed(range(self.dim)):
            out = np.tensordot(out, self.weights(a), axes=([a], [0]))
        return float(out)

    def nodes(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.coords, indexing="ij"))

    def collar_mask(self, eps: float) -> np.ndarray:
        """Nodes within distance eps of the box boundary (non-periodic axes only)."""
        mask = np.zeros(self.shape, bool)
        for a, c in enumerate(self.coords):
            if self.periodic[a]:
                continue
            near = (c - c[0] <= eps * (1 + 1e-12)) | (c[-1] - c <= eps * (1 + 1e-12))
            shape = [1] * self.dim
            shape[a] = -1
            mask |= near.reshape(shape)
        return mask


def _cumtrapz(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Cumulative trapezoid integral from the first node (value 0 there)."""
    f = np.moveaxis(f, axis, -1)
    inc = 0.5 * (f[..., :-1] + f[..., 1:]) * h
    out = np.concatenate([np.zeros(f.shape[:-1] + (1,)), np.cumsum(inc, axis=-1)], axis=-1)
    return np.moveaxis(out, -1, axis)


def bump(u: np.ndarray) -> np.ndarray:
    """C-infinity bump exp(1 - 1/(1-u^2)) on (-1, 1), zero outside."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
    return out


def _unit_bump(x: np.ndarray, lo: float, hi: float, weights: np.ndarray) -> np.ndarray:
    """Bump on (lo, hi) normalized to unit discrete integral with the given weights."""
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    e = bump((x - mid) / half)
    s = float(np.dot(e, weights))
    if s <= 0:
        raise PreconditionError(f"support extent [{lo}, {hi}] too small for a bump on this grid")
    return e / s


# ---------------------------------------------------------------------------
# primitive


@dataclass(frozen=True, eq=False)
class CoForm:
    """Primitive of a top-degree deficit: U (1D, shape (1, n)) or (beta1, beta2) (2D)."""

    values: np.ndarray
    support: tuple
    box: Box


def _full_support(box: Box) -> tuple:
    return tuple((0, n - 1) for n in box.shape)


def primitive(w, box: Box, support=None) -> CoForm:
    """Compactly supported primitive of a zero-integral deficit w on a box.

    1D: U(x) = int_{x0}^x w.  2D (axes x, t): beta = (-Kw, U(x) e(t)) with
    Kw(x, t) = int_{t0}^t w - A(t) int w dt, A the cumulative of a unit bump e
    on the support's t extent, U the cumulative of int w dt along x.
    ``support`` lists inclusive node index ranges per axis.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != box.shape:
        raise PreconditionError(f"deficit shape {w.shape} != box shape {box.shape}")
    support = _full_support(box) if support is None else tuple(tuple(s) for s in support)
    inside = np.zeros(box.shape, bool)
    inside[tuple(slice(a, b + 1) for a, b in support)] = True
    scale = max(1.0, float(np.abs(w).max()))
    if np.abs(w[~inside]).max(initial=0.0) > 1e-12 * scale:
        raise PreconditionError("deficit is nonzero outside the declared support box")
    out = np.zeros((box.dim,) + box.shape)
    if not w.any():
        return CoForm(out, support, box)
    l1 = box.integrate(np.abs(w))
    total = box.integrate(w)
    # relative test, with a rounding floor for deficits that are themselves rounding noise
    if abs(total) > 1e-9 * l1 + 1e-15 * box.integrate(np.ones(box.shape)):
        raise PreconditionError(f"deficit integral {total:.3e} is not zero (L1 norm {l1:.3e})")

    sl = tuple(slice(a, b + 1) for a, b in support)
    sub = w[sl]
    full = [(lo, hi) == (0, n - 1) for (lo, hi), n in zip(support, box.shape)]
    per = [box.periodic[a] and full[a] for a in range(box.dim)]
    hs = [box.spacing(a) for a in range(box.dim)]

    def cum(f, a):
        if per[a]:
            return _cumtrapz(np.concatenate([f, np.take(f, [0], axis=a)], axis=a), hs[a], a).take(
                np.arange(f.shape[a]), axis=a)
        return _cumtrapz(f, hs[a], a)

    def total_along(f, a):
        if per[a]:
            return f.sum(axis=a) * hs[a]
        g = np.moveaxis(f, a, -1)
        return 0.5 * hs[a] * (g[..., 0] + g[..., -1]) + hs[a] * g[..., 1:-1].sum(axis=-1)

    if box.dim == 1:
        U = cum(sub, 0)
        out[0][sl] = U
        return CoForm(out, support, box)

    t = box.coords[1][sl[1]]
    wt = np.full(t.size, hs[1]) if per[1] else np.r_[0.5 * hs[1], np.full(t.size - 2, hs[1]), 0.5 * hs[1]]
    hi_t = t[0] + t.size * hs[1] if per[1] else t[-1]
    e = _unit_bump(t, t[0], hi_t, wt)
    A = cum(e[None, :], 1)[0]
    F = total_along(sub, 1)
    K = cum(sub, 1) - A[None, :] * F[:, None]
    U = cum(F[:, None], 0)[:, 0]
    out[0][sl] = -K
    out[1][sl] = U[:, None] * e[None, :]
    return CoForm(out, support, box)


def exterior_derivative(beta: CoForm) -> np.ndarray:
    """Discrete d: cell circulation of the node 1-form (trapezoid edges) divided by cell area."""
    box = beta.box
    v = beta.values
    if box.dim == 1:
        U = v[0]
        if box.periodic[0]:
            return (np.roll(U, -1) - U) / box.spacing(0)
        return np.diff(U) / box.spacing(0)
    b1, b2 = v
    hx, ht = box.spacing(0), box.spacing(1)

    def nxt(f, a):
        if box.periodic[a]:
            return np.roll(f, -1, axis=a)
        return np.take(f, np.arange(1, f.shape[a]), axis=a)

    def cur(f, a):
        if box.periodic[a]:
            return f
        return np.take(f, np.arange(f.shape[a] - 1), axis=a)

    # trapezoid edge integrals
    bottom = 0.5 * hx * (cur(b1, 0) + nxt(b1, 0))
    left = 0.5 * ht * (cur(b2, 1) + nxt(b2, 1))
    circ = cur(bottom, 1) - nxt(bottom, 1) + nxt(left, 0) - cur(left, 0)
    return circ / (hx * ht)


def cell_average(w: np.ndarray, box: Box) -> np.ndarray:
    out = w
    for a in range(box.dim):
        if box.periodic[a]:
            out = 0.5 * (out + np.roll(out, -1, axis=a))
        else:
            n = out.shape[a]
            out = 0.5 * (np.take(out, np.arange(n - 1), axis=a) + np.take(out, np.arange(1, n), axis=a))
    return out


# ---------------------------------------------------------------------------
# Moser flow


@dataclass(frozen=True, eq=False)
class MoserProblem:
    mu: DensityField
    nu: DensityField
    collar: float

    def __post_init__(self):
        self.mu.domain.require_same(self.nu.domain)
        if self.mu.domain.noncompact:
            raise PreconditionError("the Moser solver works on compact domains; use piecewise_moser")
        if not self.collar > 0:
            raise PreconditionError(f"collar width must be positive, got {self.collar}")


def _samples_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(np.abs(a - b) <= EQUAL_RTOL * np.abs(b)))


def _support_range(box: Box, eps2: float) -> tuple:
    out = []
    for a, c in enumerate(box.coords):
        if box.periodic[a]:
            out.append((0, len(c) - 1))
            continue
        tol = 1e-12 * (1 + abs(eps2))
        lo = int(np.flatnonzero(c - c[0] <= eps2 + tol).max())
        hi = int(np.flatnonzero(c[-1] - c <= eps2 + tol).min())
        if hi - lo < 4:
            raise PreconditionError(f"collar 2*eps = {eps2} leaves no interior on axis {a}")
        out.append((lo, hi))
    return tuple(out)


def _zero_mean(w: np.ndarray, box: Box, support: tuple) -> np.ndarray:
    """Remove the (round-off level) integral of w with a bump inside the support."""
    total = box.integrate(w)
    if total == 0.0:
        return w
    prof = np.ones(box.shape)
    for a, (lo, hi) in enumerate(support):
        c = box.coords[a]
        if box.periodic[a] and (lo, hi) == (0, len(c) - 1):
            continue
        shape = [1] * box.dim
        shape[a] = -1
        prof = prof * bump((c - 0.5 * (c[lo] + c[hi])) / (0.5 * (c[hi] - c[lo]))).reshape(shape)
    return w - total * prof / box.integrate(prof)


def _integrate_backward(box: Box, beta: np.ndarray, rho0: np.ndarray, drho: np.ndarray,
                        steps: int, record_every: int):
    """Follow the Moser field backward from t = 1 to t = 0 starting at every node."""
    grid = box.grid
    dim = box.dim
    stack = np.concatenate([beta, rho0[None], drho[None]])
    padded = _interp.pad_for_cubic(stack, grid)

    def velocity(t, pts):
        vals = _interp.cubic(stack, grid, pts, padded)
        rho = vals[dim] + t * vals[dim + 1]
        if rho.min() <= 0:
            raise NumericalError("interpolated density became nonpositive along the flow")
        if dim == 1:
            return -vals[0][None] / rho
        return np.stack([-vals[1] / rho, vals[0] / rho])

    nodes = box.nodes().reshape(dim, -1)
    y = nodes.copy()
    dt = 1.0 / steps
    path = [(0.0, np.zeros_like(y))]
    for k in range(steps):
        t = 1.0 - k * dt
        k1 = velocity(t, y)
        k2 = velocity(t - 0.5 * dt, y - 0.5 * dt * k1)
        k3 = velocity(t - 0.5 * dt, y - 0.5 * dt * k2)
        k4 = velocity(t - dt, y - dt * k3)
        y = y - dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        for a in range(dim):
            if not box.periodic[a]:
                c = box.coords[a]
                if y[a].min() < c[0] - 1e-12 or y[a].max() > c[-1] + 1e-12:
                    return None
        if (k + 1) % record_every == 0 or k + 1 == steps:
            path.append(((k + 1) / steps, y - nodes))
    return path


def solve_on_box(box: Box, mu_s: np.ndarray, nu_s: np.ndarray, eps: float,
                 steps: int = DEFAULT_STEPS, record_every: int = 8):
    """Moser map on a box with collar eps; returns a list of (time, displacement) snapshots.

    The final snapshot pushes mu_s forward to nu_s and is the identity on the collar.
    """
    if _samples_equal(mu_s, nu_s):
        zero = np.zeros((box.dim,) + box.shape)
        return [(0.0, zero), (1.0, zero)]
    collar2 = box.collar_mask(2 * eps)
    if not _samples_equal(mu_s[collar2], nu_s[collar2]):
        bad = np.abs(mu_s - nu_s)[collar2].max()
        raise PreconditionError(f"mu and nu differ by {bad:.3e} on the collar E[0, 2*eps]")
    tm, tn = box.integrate(mu_s), box.integrate(nu_s)
    if abs(tm - tn) > 1e-9 * max(abs(tm), abs(tn)):
        raise MassMismatch(f"total masses differ: {tm!r} vs {tn!r}")
    support = _support_range(box, 2 * eps)
    w = _zero_mean(np.where(collar2, 0.0, mu_s - nu_s), box, support)
    beta = primitive(w, box, support).values
    path = None
    for n in (steps, RETRY_STEPS):
        path = _integrate_backward(box, beta, nu_s, mu_s - nu_s, n, max(1, n * record_every // steps))
        if path is not None:
            break
    if path is None:
        raise NumericalError(f"flow left the domain even with {RETRY_STEPS} steps")
    fixed = box.collar_mask(eps).ravel()
    out = []
    for t, disp in path:
        disp = disp.copy()
        disp[:, fixed] = 0.0
        out.append((t, disp.reshape((box.dim,) + box.shape)))
    return out


def moser_flow_solve(p: MoserProblem, steps: int = DEFAULT_STEPS, record_every: int = 8):
    """psi with psi_* mu = nu, identity on the collar E[0, eps]; plus the isotopy witness."""
    d = p.mu.domain
    box = Box.from_domain(d)
    snaps = solve_on_box(box, p.mu.samples, p.nu.samples, p.collar, steps, record_every)
    maps = tuple(DiffeoMap(d, disp) for _, disp in snaps)
    return maps[-1], IsotopyPath(tuple(t for t, _ in snaps), maps)


# ---------------------------------------------------------------------------
# 1D cumulative transport


def _pl_cumulative(x: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(0.5 * (rho[:-1] + rho[1:]) * np.diff(x))])


def _pl_cdf_inverse(x: np.ndarray, rho: np.ndarray, C: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Solve C(s) = y for the exact cumulative of a piecewise linear density."""
    y = np.clip(y, 0.0, C[-1])
    i = np.clip(np.searchsorted(C, y, side="right") - 1, 0, len(x) - 2)
    h = x[i + 1] - x[i]
    r = (y - C[i]) / h
    a = 0.5 * (rho[i + 1] - rho[i])
    b = rho[i]
    t = 2 * r / (b + np.sqrt(np.maximum(b * b + 4 * a * r, 0.0)))
    return x[i] + np.clip(t, 0.0, 1.0) * h


def cdf_transport_1d(mu: DensityField, nu: DensityField) -> DiffeoMap:
    """The monotone boundary-fixing map G^-1 o F transporting mu to nu on an interval."""
    mu.domain.require_same(nu.domain)
    d = mu.domain
    if d.dim != 1 or d.periodic[0] or d.noncompact:
        raise PreconditionError("cdf_transport_1d needs a compact non-periodic 1D domain")
    if np.array_equal(mu.samples, nu.samples):
        return DiffeoMap.identity(d)
    x = d.coords(0)
    F = _pl_cumulative(x, mu.samples)
    G = _pl_cumulative(x, nu.samples)
    if abs(F[-1] - G[-1]) > 1e-9 * max(F[-1], G[-1]):
        raise MassMismatch(f"total masses differ: {F[-1]!r} vs {G[-1]!r}")
    v = _pl_cdf_inverse(x, nu.samples, G, F * (G[-1] / F[-1]))
    v[0], v[-1] = x[0], x[-1]
    return DiffeoMap.from_values(d, v)


# ---------------------------------------------------------------------------
# collar normalization


def _alpha(s: np.ndarray) -> np.ndarray:
    """Increasing map onto (-1/2, 1/2), the identity on [-1/3, 1/3]."""
    a = np.abs(s)
    out = np.where(a <= 1 / 3, a, 1 / 3 + np.tanh(6.0 * (a - 1 / 3)) / 6.0)
    return np.sign(s) * out


def smoothstep(s: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for s <= 0, 1 for s >= 1."""
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        b = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
    return a / (a + b)


def _lambda_cut(t: np.ndarray) -> np.ndarray:
    # switches on right after the quarter-width agreement zone, as gently as possible
    return smoothstep((np.abs(t) - 0.25) / 0.75)


def _fiber_cumulative(rho: np.ndarray, m: int, s: np.ndarray) -> np.ndarray:
    """Exact cumulative of per-fiber piecewise linear densities at per-fiber points s in [0, 1]."""
    h = 1.0 / m
    C = np.concatenate([np.zeros((rho.shape[0], 1)),
                        np.cumsum(0.5 * (rho[:, :-1] + rho[:, 1:]) * h, axis=1)], axis=1)
    i = np.clip(np.floor(s * m).astype(int), 0, m - 1)
    t = s * m - i
    r0 = np.take_along_axis(rho, i, axis=1)
    r1 = np.take_along_axis(rho, i + 1, axis=1)
    c0 = np.take_along_axis(C, i, axis=1)
    return c0 + h * (r0 * t + 0.5 * (r1 - r0) * t * t)


def _ftilde(hrho: np.ndarray, m: int, s: np.ndarray) -> np.ndarray:
    lam = _lambda_cut(s)
    return (1 - lam) * _alpha(_fiber_cumulative(hrho, m, s)) + lam * s


def normalize_fibers(rho_mu: np.ndarray, rho_nu: np.ndarray, width: float):
    """Fiberwise collar normalization on strips parametrized by t in [0, 1].

    Inputs are densities (n_fibers, m + 1) at t_j = j / m (t = 0 is the frontier
    side).  Returns the new node positions phi(t_j) and the agreement depth in t.
    """
    nf, m1 = rho_mu.shape
    m = m1 - 1
    t = np.tile(np.linspace(0.0, 1.0, m1), (nf, 1))
    equal = np.all(rho_mu == rho_nu, axis=1)
    # reference product form c(x) dt dx scaled so each cumulative stays below 1/4 at t = 1/2
    c = 2.0 * width * np.maximum(rho_mu.max(axis=1), rho_nu.max(axis=1))
    hm = width * rho_mu / c[:, None]
    hn = width * rho_nu / c[:, None]
    target = _ftilde(hm, m, t)
    lo, hi = np.zeros_like(t), np.ones_like(t)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        below = _ftilde(hn, m, mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    phi = 0.5 * (lo + hi)
    phi[:, 0], phi[:, -1] = 0.0, 1.0
    phi[equal] = t[equal]

    def gamma(hr):
        f = _fiber_cumulative(hr, m, np.full((nf, 1), 0.5))[:, 0]
        out = np.full(nf, 0.5)
        need = f > 1 / 3
        if need.any():
            a, b = np.zeros(need.sum()), np.full(need.sum(), 0.5)
            for _ in range(60):
                mid = 0.5 * (a + b)
                over = _fiber_cumulative(hr[need], m, mid[:, None])[:, 0] > 1 / 3
                b = np.where(over, mid, b)
                a = np.where(over, a, mid)
            out[need] = a
        return out

    depth = float(min(0.25, gamma(hm).min(), gamma(hn).min()))
    return phi, depth


def _strip_range(collar: Region, axis: int) -> tuple:
    d = collar.domain
    if collar.tails:
        raise PreconditionError("collar strip must not contain end tails")
    mask = collar.mask
    prof = mask.any(axis=tuple(a for a in range(d.dim) if a != axis))
    idx = np.flatnonzero(prof)
    if idx.size == 0:
        raise PreconditionError("collar strip is empty")
    c0, c1 = int(idx[0]), int(idx[-1]) + 1
    want = np.zeros(d.cell_shape, bool)
    sl = [slice(None)] * d.dim
    sl[axis] = slice(c0, c1)
    want[tuple(sl)] = True
    if not np.array_equal(mask, want) or d.periodic[axis]:
        raise PreconditionError("collar is not a product strip S x [0, 1] along the given axis")
    return c0, c1


def collar_normalize(mu: DensityField, nu: DensityField, collar: Region, direction) -> tuple:
    """Fiberwise map supported in a product strip with psi_* mu = nu near the strip's t = 0 side.

    ``direction`` is (axis, sign): sign +1 puts t = 0 at the lower edge of the strip.
    Returns (map, agreement width in coordinate units).
    """
    mu.domain.require_same(nu.domain)
    d = mu.domain
    axis, sign = direction
    c0, c1 = _strip_range(collar, axis)
    x = d.coords(axis)
    width = float(x[c1] - x[c0])
    sel = [slice(None)] * d.dim
    sel[axis] = slice(c0, c1 + 1)
    rm = np.moveaxis(mu.samples[tuple(sel)], axis, -1).reshape(-1, c1 - c0 + 1)
    rn = np.moveaxis(nu.samples[tuple(sel)], axis, -1).reshape(-1, c1 - c0 + 1)
    if sign < 0:
        rm, rn = rm[:, ::-1], rn[:, ::-1]
    if np.array_equal(rm, rn):
        return DiffeoMap.identity(d), 0.25 * width
    phi, depth = normalize_fibers(rm, rn, width)
    m = c1 - c0
    t = np.linspace(0.0, 1.0, m + 1)
    dt = (phi - t[None, :]) * width
    if sign < 0:
        dt = -dt[:, ::-1]
    disp = np.zeros((d.dim,) + d.node_shape)
    other = [n for a, n in enumerate(d.node_shape) if a != axis]
    block = np.moveaxis(dt.reshape(other + [m + 1]), -1, axis)
    disp[axis][tuple(sel)] = block
    return DiffeoMap(d, disp), depth * width


# ---------------------------------------------------------------------------
# block-wise matching over an exhaustion


def _node_range(R: Region) -> tuple:
    d = R.domain
    ax = d.axial
    prof = R.axial_profile()
    idx = np.flatnonzero(prof)
    return int(idx[0]), int(idx[-1]) + 1


def _block_ranges(ex: Exhaustion) -> list:
    return sorted(_node_range(B) for B in ex.blocks())


def _interior_bump(d: Domain, i0: int, i1: int) -> np.ndarray:
    """theta-independent bump in the middle half of the axial node range [i0, i1]."""
    x = d.coords(d.axial)
    a, b = x[i0], x[i1]
    q = 0.25 * (b - a)
    prof = bump((x - 0.5 * (a + b)) / q)
    return np.broadcast_to(prof, d.node_shape).copy()


def piecewise_moser(mu: DensityField, nu: DensityField, ex: Exhaustion,
                    steps: int = DEFAULT_STEPS) -> DiffeoMap:
    """chi with chi_* mu = nu that maps every exhaustion block onto itself."""
    mu.domain.require_same(nu.domain)
    d = mu.domain
    ex.domain.require_same(d)
    ax = d.axial
    x = d.coords(ax)
    h = d.spacing(ax)
    ranges = _block_ranges(ex)
    blocks = ex.blocks()
    for k, B in enumerate(blocks):
        mb, nb = mass(mu, B), mass(nu, B)
        if abs(mb - nb) > 1e-8 * max(mb, 1.0):
            lo, hi = _node_range(B)
            raise MassMismatch(
                f"block {k} (axial [{x[lo]:.6g}, {x[hi]:.6g}]) masses differ: {mb!r} vs {nb!r}")
    lo_all = min(r[0] for r in ranges)
    hi_all = max(r[1] for r in ranges)
    outside = np.ones(x.size, bool)
    outside[lo_all:hi_all + 1] = False
    outside[[lo_all, hi_all]] = True
    sel = [slice(None)] * d.dim
    sel[ax] = outside
    if mu.tails != nu.tails or not _samples_equal(mu.samples[tuple(sel)], nu.samples[tuple(sel)]):
        raise PreconditionError("mu and nu must agree beyond the last exhaustion level")
    if np.array_equal(mu.samples, nu.samples):
        return DiffeoMap.identity(d)

    min_len = min(x[b] - x[a] for a, b in ranges)
    cells = int(math.floor(0.25 * min_len / h + 1e-9))
    if cells < 4:
        raise PreconditionError("exhaustion blocks are too short for collar strips on this grid")
    width = cells * h

    def strip(c0, c1):
        prof = np.zeros(d.cell_shape[ax], bool)
        prof[c0:c1] = True
        return Region(d, np.broadcast_to(prof, d.cell_shape).copy())

    # chi1 at the manifold boundary, chi2 on both sides of every block frontier
    frontiers = sorted({i for r in ranges for i in r})
    pieces = []
    for i in frontiers:
        if i == 0 and not any(e.sign < 0 for e in d.ends):
            pieces.append((strip(0, cells), (ax, 1)))
            continue
        if i - cells >= 0:
            pieces.append((strip(i - cells, i), (ax, -1)))
        if i + cells <= x.size - 1:
            pieces.append((strip(i, i + cells), (ax, 1)))
    chi12 = DiffeoMap.identity(d)
    depths = []
    for S, direction in pieces:
        psi, dep = collar_normalize(mu, nu, S, direction)
        depths.append(dep)
        chi12 = compose(psi, chi12)
    eps_hat = min(depths)
    mid = pushforward(chi12, mu)

    # freeze the agreement zones to nu and correct block masses (discretization level)
    s = mid.samples.copy()
    dist = np.min(np.abs(x[:, None] - x[frontiers][None, :]), axis=1)
    zone = (dist <= eps_hat * (1 + 1e-12)) | outside
    zsel = [slice(None)] * d.dim
    zsel[ax] = zone
    s[tuple(zsel)] = nu.samples[tuple(zsel)]
    box = Box.from_domain(d)
    for a, b in ranges:
        bsel = [slice(None)] * d.dim
        bsel[ax] = slice(a, b + 1)
        sub = Box(tuple(box.coords[k] if k != ax else x[a:b + 1] for k in range(d.dim)),
                  tuple(box.periodic[k] if k != ax else False for k in range(d.dim)))
        delta = sub.integrate(nu.samples[tuple(bsel)]) - sub.integrate(s[tuple(bsel)])
        bp = _interior_bump(d, a, b)[tuple(bsel)]
        s[tuple(bsel)] += delta * bp / sub.integrate(bp)
    if s.min() <= 0:
        raise NumericalError("block mass correction lost positivity")

    # chi3: Moser on every block with collar eps_hat / 2
    disp = np.zeros((d.dim,) + d.node_shape)
    for a, b in ranges:
        bsel = [slice(None)] * d.dim
        bsel[ax] = slice(a, b + 1)
        sub = Box(tuple(box.coords[k] if k != ax else x[a:b + 1] for k in range(d.dim)),
                  tuple(box.periodic[k] if k != ax else False for k in range(d.dim)))
        snaps = solve_on_box(sub, s[tuple(bsel)], nu.samples[tuple(bsel)], 0.5 * eps_hat, steps)
        disp[(slice(None),) + tuple(bsel)] = snaps[-1][1]
    chi3 = DiffeoMap(d, disp)
    return compose_all(chi3, chi12)
