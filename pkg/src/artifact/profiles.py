"""Fixture builders: smooth bump densities, balanced deficits and admissible maps."""

from __future__ import annotations

import math

import numpy as np

from .domain import Domain, build_domain
from .fields import DensityField, DiffeoMap, TailModel, compose
from .moser import bump

DEFAULT_SEED = 20240601


def rng_from(seed=None) -> np.random.Generator:
    return np.random.default_rng(DEFAULT_SEED if seed is None else seed)


def _wrap(d: Domain, a: int, diff):
    if d.periodic[a]:
        P = d.period(a)
        return np.mod(diff + 0.5 * P, P) - 0.5 * P
    return diff


def bump_at(d: Domain, center, radius) -> np.ndarray:
    """Smooth compactly supported bump (peak 1) at a center with per-axis radii."""
    grids = d.node_grid()
    center = np.atleast_1d(center)
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (d.dim,))
    r2 = 0.0
    for a in range(d.dim):
        r2 = r2 + (_wrap(d, a, grids[a] - center[a]) / radius[a]) ** 2
    return bump(np.sqrt(r2))


def balanced(plus: np.ndarray, minus: np.ndarray) -> np.ndarray:
    """plus - c * minus with zero discrete sum (bumps vanish on the boundary)."""
    return plus - minus * plus.sum() / minus.sum()


def density(d: Domain, samples, rate: float = 1.0) -> DensityField:
    return DensityField(d, samples, {e: TailModel.constant(rate) for e in d.end_ids})


# ---------------------------------------------------------------------------
# compact Moser fixtures


def moser_pairs(seed=None, n1d: int = 10, n2d: int = 10):
    """(name, mu, nu, collar) with equal masses and mu = nu near the boundary."""
    rng = rng_from(seed)
    out = []
    d1 = build_domain(kind="interval", nodes=1024)
    for i in range(n1d):
        c = rng.uniform(0.3, 0.7, size=4)
        a = rng.uniform(0.1, 0.4, size=2)
        base = 1.0 + 0.3 * bump_at(d1, [rng.uniform(0.35, 0.65)], 0.25)
        mu = DensityField(d1, base + a[0] * balanced(bump_at(d1, [c[0]], 0.15),
                                                     bump_at(d1, [c[1]], 0.15)))
        nu = DensityField(d1, base + a[1] * balanced(bump_at(d1, [c[2]], 0.15),
                                                     bump_at(d1, [c[3]], 0.15)))
        out.append((f"interval-{i}", mu, nu, 0.05))
    for i in range(n2d):
        kind = "torus" if i % 2 == 0 else "rectangle"
        d2 = build_domain(kind=kind, nodes=128)
        c = rng.uniform(0.38, 0.62, size=(4, 2))
        a = rng.uniform(0.1, 0.3, size=2)
        mu = DensityField(d2, 1.0 + a[0] * balanced(bump_at(d2, c[0], 0.2), bump_at(d2, c[1], 0.2)))
        nu = DensityField(d2, 1.0 + a[1] * balanced(bump_at(d2, c[2], 0.2), bump_at(d2, c[3], 0.2)))
        out.append((f"{kind}-{i // 2}", mu, nu, 0.05))
    return out


def random_deficit(d: Domain, rng, radius: float) -> np.ndarray:
    """Zero-integral smooth deficit supported away from the boundary."""
    lo, hi = 0.5 - (0.5 - radius - 0.05), 0.5 + (0.5 - radius - 0.05)
    c = rng.uniform(lo, hi, size=(2, d.dim))
    w = balanced(bump_at(d, c[0], radius), bump_at(d, c[1], radius))
    return rng.uniform(0.2, 1.0) * w


# ---------------------------------------------------------------------------
# noncompact fixtures


def line(T: float = 10.0, nodes: int = 1025) -> Domain:
    return build_domain(kind="line", truncation=T, nodes=nodes)


def half_line(T: float = 10.0, nodes: int = 513) -> Domain:
    return build_domain(kind="half_line", truncation=T, nodes=nodes)


def cylinder(T: float = 5.0, nodes=(32, 256)) -> Domain:
    return build_domain(kind="cylinder", truncation=T, nodes=list(nodes))


def _axial_bump(d: Domain, u: float, r: float, theta=None, rt: float = 1.2) -> np.ndarray:
    u = d.snap(u)
    if d.dim == 1:
        return bump_at(d, [u], r)
    if theta is None:
        return bump_at(d, [0.0, u], [1e9, r])
    return bump_at(d, [theta, u], [rt, r])


def volume_pairs(seed=None):
    """Ten noncompact (name, mu, nu) pairs with equal window mass and equal end data."""
    rng = rng_from(seed)
    out = []
    dl = line()
    for i in range(4):
        amp = rng.uniform(0.2, 0.5)
        u1, u2 = rng.uniform(-2.5, -0.5), rng.uniform(0.5, 2.5)
        r = rng.uniform(0.4, 0.6)
        rate = 1.0 if i % 2 == 0 else 1.5
        A = _axial_bump(dl, u1, r)
        B = _axial_bump(dl, u2, r)
        mu = density(dl, rate + amp * A, rate)
        nu = density(dl, rate + amp * B * A.sum() / B.sum(), rate)
        out.append((f"line-{i}", mu, nu))
    dh = half_line()
    for i in range(3):
        amp = rng.uniform(0.2, 0.5)
        u1, u2 = rng.uniform(1.5, 2.5), rng.uniform(3.5, 4.5)
        A = _axial_bump(dh, u1, 0.6)
        B = _axial_bump(dh, u2, 0.6)
        mu = density(dh, 1.0 + amp * A)
        nu = density(dh, 1.0 + amp * B * A.sum() / B.sum())
        out.append((f"half_line-{i}", mu, nu))
    dc = cylinder()
    for i in range(3):
        amp = rng.uniform(0.2, 0.4)
        th = rng.uniform(0, 2 * math.pi, size=2)
        u1, u2 = rng.uniform(-1.5, -0.8), rng.uniform(0.8, 1.5)
        A = _axial_bump(dc, u1, 0.45, th[0])
        B = _axial_bump(dc, u2, 0.45, th[1])
        mu = density(dc, 1.0 + amp * A)
        nu = density(dc, 1.0 + amp * B * A.sum() / B.sum())
        out.append((f"cylinder-{i}", mu, nu))
    return out


# ---------------------------------------------------------------------------
# maps


def translation(d: Domain, s: float) -> DiffeoMap:
    """Global axial translation by s (a collar shift at every end)."""
    disp = np.zeros((d.dim,) + d.node_shape)
    disp[d.axial] = s
    shifts = {e.id: e.sign * s for e in d.ends}
    return DiffeoMap(d, disp, shifts)


def shear(d: Domain, u0: float, r: float, amount: float) -> DiffeoMap:
    """Area-preserving compactly supported twist theta -> theta + amount * bump(u)."""
    if d.dim != 2 or not d.periodic[0]:
        raise ValueError("shears need a periodic transverse axis")
    u = d.coords(d.axial)
    prof = amount * bump((u - u0) / r)
    disp = np.zeros((d.dim,) + d.node_shape)
    disp[0] = prof[None, :]
    return DiffeoMap(d, disp)


def admissible_map(d: Domain, rng, max_shift: float = 2.0) -> DiffeoMap:
    """Random uniform-measure-preserving map: a translation, composed with a shear in 2D."""
    h = translation(d, float(rng.uniform(-max_shift, max_shift)))
    if d.dim == 2:
        # keep the shear well inside the window so composites stay collar shifts at the edges
        c = float(rng.uniform(-0.1, 0.1) * d.truncation)
        h = compose(shear(d, c, 0.15 * d.truncation, float(rng.uniform(-1.5, 1.5))), h)
    return h


def compact_map(d: Domain, rng) -> DiffeoMap:
    """Random compactly supported uniform-measure-preserving map (identity in 1D)."""
    if d.dim == 1:
        return DiffeoMap.identity(d)
    out = DiffeoMap.identity(d)
    for _ in range(2):
        c = float(rng.uniform(-0.3, 0.3) * d.truncation)
        out = compose(shear(d, c, 0.15 * d.truncation, float(rng.uniform(-2, 2))), out)
    return out


# ---------------------------------------------------------------------------
# named profiles for the command line

PROFILES = ("uniform", "bump", "random")


def _window(d: Domain, a: int) -> tuple:
    x = d.coords(a)
    return float(x[0]), float(x[-1])


def field_profile(d: Domain, name: str, seed=None, rate: float = 1.0,
                  amplitude: float = 0.3) -> DensityField:
    """rate * (1 + bumps) with constant-rate tails; bumps stay clear of every edge.

    "random" adds balanced bump pairs, so it has the same mass as "uniform" at equal rate.
    """
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; expected one of {PROFILES}")
    s = np.ones(d.node_shape)
    spans = [_window(d, a) for a in range(d.dim)]
    if name == "bump":
        center = [0.5 * (lo + hi) for lo, hi in spans]
        radius = [0.25 * (hi - lo) for lo, hi in spans]
        if d.dim == 2 and d.periodic[0]:
            radius[0] = 1e9
        s = s + amplitude * bump_at(d, center, radius)
    elif name == "random":
        rng = rng_from(seed)
        radius = [0.15 * (hi - lo) for lo, hi in spans]
        for _ in range(2):
            plus, minus = ([rng.uniform(lo + 0.3 * (hi - lo), hi - 0.3 * (hi - lo)) for lo, hi in spans]
                           for _ in range(2))
            # overlapping pairs can dip by at most amplitude
            s = s + 0.5 * rng.uniform(0.3, 1.0) * amplitude * balanced(bump_at(d, plus, radius),
                                                                     bump_at(d, minus, radius))
    return density(d, rate * s, rate)
