"""Mass transfer by engulfing flows, component balancing and the two matching pipelines."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import domain as _domain
from .domain import Domain, Region, components, standard_exhaustion
from .ends import (EndCharge, end_charge_of, preservation_budget, preservation_residual,
                   validate_charge)
from .errors import (EndSetMismatch, InfeasibleTargets, InvalidMap, MassMismatch,
                     NumericalError, OutOfRange, PreconditionError)
from .fields import (DensityField, DiffeoMap, IsotopyPath, compose, compose_all, finite_ends,
                     invert, j_transfer, mass, preimage, pushforward)
from .moser import piecewise_moser

ROOT_TOL = 1e-10
SUM_TOL = 1e-10
MARGIN = 1e-9
# targets below this (relative) size are treated as zero so exact moves stay exact
NOISE_FLOOR = 1e-13
MAX_TIME = 1e9


# ---------------------------------------------------------------------------
# ramp profile of the engulfing speed and its time function


def ramp(s):
    """C2 smoothstep s^3 (10 - 15 s + 6 s^2) on [0, 1]."""
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


# 1 / (s^3 q(s)) = 0.1/s^3 + 0.15/s^2 + 0.165/s + (1.575 - 0.99 s)/q(s),  q = 6s^2 - 15s + 10
_K = math.sqrt(5.0 / 48.0)
_ALPHA = -0.99 / 12.0
_BETA = 1.575 + 15.0 * _ALPHA


def _q(s):
    return 6.0 * s * s - 15.0 * s + 10.0


def ramp_time(s):
    """Travel time from s to 1 at unit-width speed ramp(s): integral of 1/ramp over [s, 1]."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        inv = 1.0 / s
        out = (0.05 * (inv * inv - 1.0) + 0.15 * (inv - 1.0) - 0.165 * np.log(s)
               - _ALPHA * np.log(_q(s))
               + _BETA / (6.0 * _K) * (np.arctan(-0.25 / _K) - np.arctan((s - 1.25) / _K)))
    return out


def ramp_time_inverse(y):
    """s in (0, 1] with ramp_time(s) = y >= 0 (safeguarded Newton)."""
    y = np.asarray(y, dtype=float)
    sig = (-0.15 + np.sqrt(0.0225 + 0.2 * (y + 0.2))) / 0.1
    s = np.clip(1.0 / np.maximum(sig, 1.0), 1e-150, 1.0)
    lo = np.zeros_like(y)
    hi = np.ones_like(y)
    for _ in range(100):
        with np.errstate(invalid="ignore", over="ignore"):
            f = ramp_time(s) - y
        lo = np.where(f > 0, s, lo)
        hi = np.where(f <= 0, s, hi)
        with np.errstate(invalid="ignore", over="ignore"):
            new = s + f * ramp(s)  # Newton: d ramp_time / ds = -1 / ramp
        bad = (new <= lo) | (new >= hi) | ~np.isfinite(new)
        new = np.where(bad, np.where(lo > 0, np.sqrt(lo * hi), 0.5 * hi), new)
        done = np.abs(new - s) <= 4e-16 * s
        s = new
        if done.all():
            break
    return np.where(y <= 0, 1.0, s)


# ---------------------------------------------------------------------------
# engulfing families


@dataclass(frozen=True, eq=False)
class EngulfFamily:
    """Frontier-advancing flow f_t that enlarges L inside a support slab.

    Along the axial coordinate the speed is 1 away from the (at most one)
    finite wall of the support and ramps to 0 over ``width`` after an identity
    gap next to the wall.  Toward unbounded sides f_t is a translation, i.e. a
    collar shift at those ends.
    """

    domain: Domain = field(repr=False)
    L: Region = field(repr=False)
    N: Region = field(repr=False)
    frontier: float
    grow: int  # +1 when L grows toward increasing axial coordinate
    wall: float | None
    wall_side: int  # -1 wall below the frontier, +1 above, 0 no wall
    gap: float
    width: float

    def _flow(self, u, tau):
        """Canonical flow by time tau."""
        if self.wall is None:
            return u + tau
        m = -1.0 if self.wall_side > 0 else 1.0
        u0 = m * self.wall + self.gap
        u1 = u0 + self.width
        w = self.width
        with np.errstate(divide="ignore", invalid="ignore"):
            G = np.where(u >= u1, u - u1, -w * ramp_time((u - u0) / w))
        G2 = G + tau
        back = np.where(G2 >= 0, u1 + G2, u0 + w * ramp_time_inverse(np.maximum(-G2, 0.0) / w))
        return np.where(u <= u0, u, back)

    def position(self, u, t):
        """Axial image of coordinate u under f_t."""
        u = np.asarray(u, dtype=float)
        m = -1.0 if self.wall_side > 0 else 1.0
        tau = self.grow * m * t
        return m * self._flow(m * u, tau)

    def frontier_at(self, t) -> float:
        return float(self.position(np.array([self.frontier]), t)[0])

    def map(self, t) -> DiffeoMap:
        """f_t as a sampled map (axial displacement only)."""
        d = self.domain
        if t == 0:
            return DiffeoMap.identity(d)
        ax = d.axial
        x = d.coords(ax)
        fx = self.position(x, t)
        disp = np.zeros((d.dim,) + d.node_shape)
        disp[ax] = np.broadcast_to(fx - x, d.node_shape)
        shifts = {}
        for e in d.ends:
            i = -1 if e.sign > 0 else 0
            shifts[e.id] = e.sign * (fx[i] - x[i])
        return DiffeoMap(d, disp, shifts)

    def h_map(self, t) -> DiffeoMap:
        """H_t = f_t^-1, which is the flow run backwards."""
        return self.map(-t)

    def support_window(self, t) -> tuple:
        """Axial range outside which f_s is a translation or the identity for |s| <= |t|."""
        lo = self.frontier - abs(t) - self.width
        hi = self.frontier + abs(t) + self.width
        if self.wall is not None:
            lo, hi = (self.wall, hi) if self.wall_side < 0 else (lo, self.wall)
        return lo, hi


def _single_interval(R: Region, what: str) -> tuple:
    if not R.is_slab():
        raise PreconditionError(f"{what} must be an axial slab")
    iv = R.axial_intervals()
    if len(iv) != 1:
        raise PreconditionError(f"{what} is disconnected ({len(iv)} axial pieces)")
    return iv[0]


def engulf_family(d: Domain, L: Region, support: Region | None = None) -> EngulfFamily:
    """Engulfing family enlarging L inside ``support`` (default: the whole domain)."""
    if not d.noncompact:
        raise PreconditionError("engulfing families need a domain with ends")
    if d.periodic[d.axial]:
        raise PreconditionError("engulfing along a periodic axis is not supported")
    S = Region.full(d) if support is None else support
    d.require_same(L.domain)
    if not (L - S).is_empty():
        raise PreconditionError("L must lie inside the support")
    N = S - L
    if L.is_empty() or N.is_empty():
        raise PreconditionError("L and its complement in the support must be nonempty")
    for R, name in ((L, "L"), (N, "N")):
        if len(components(R)) != 1:
            raise PreconditionError(f"{name} is disconnected")
    lo, hi = _single_interval(S, "support")
    l0, l1 = _single_interval(L, "L")
    n0, n1 = _single_interval(N, "N")
    if l1 == n0:
        c, grow = l1, 1
    elif n1 == l0:
        c, grow = l0, -1
    else:
        raise PreconditionError("L and N do not share a frontier")
    if math.isfinite(lo) and math.isfinite(hi):
        raise PreconditionError("supports bounded on both sides (two walls) are not supported")
    h = d.spacing(d.axial)
    gap = 2 * h
    if math.isfinite(lo):
        wall, side, dist = lo, -1, c - lo
    elif math.isfinite(hi):
        wall, side, dist = hi, 1, hi - c
    else:
        return EngulfFamily(d, L, N, c, grow, None, 0, 0.0, 0.0)
    width = dist - gap
    if width < 2 * h - 1e-12:
        raise PreconditionError(f"frontier {c} is too close to the wall {wall} on this grid")
    return EngulfFamily(d, L, N, c, grow, wall, side, gap, width)


# ---------------------------------------------------------------------------
# transfer amounts


def _relative_transfer(mu, fam, t, pre, A, ref):
    """J(composite^-1 A, ref) for composite = H_t o pre."""
    H = fam.h_map(t)
    comp = H if pre is None else compose(H, pre)
    return j_transfer(mu, preimage(comp, A), ref)


def lambda_of(mu: DensityField, fam: EngulfFamily, t: float, pre: DiffeoMap | None = None) -> float:
    """Mass gained by L under H_t = f_t^-1 (optionally after a prior map ``pre``)."""
    if abs(t) > MAX_TIME:
        raise OutOfRange(f"time {t} outside the family range {MAX_TIME}")
    if t == 0:
        return 0.0
    ref = fam.L if pre is None else preimage(pre, fam.L)
    return _relative_transfer(mu, fam, t, pre, fam.L, ref)


def transfer_time(mu: DensityField, a: float, fam: EngulfFamily, pre: DiffeoMap | None = None,
                  tol: float = ROOT_TOL) -> float:
    """t with lambda(mu, t) = a: bracket by doubling, then Brent's method."""
    a = float(a)
    if a == 0:
        return 0.0
    if pre is None:
        mL, mN = mass(mu, fam.L), mass(mu, fam.N)
        if not (-mL < a < mN):
            raise OutOfRange(f"transfer {a} outside the reachable interval ({-mL}, {mN})")

    def obj(t):
        try:
            return lambda_of(mu, fam, t, pre) - a
        except (InvalidMap, NumericalError) as exc:
            raise OutOfRange(f"transfer {a} not resolvable on this grid: {exc}") from None

    sign = 1.0 if a > 0 else -1.0
    lo, hi = 0.0, sign * max(abs(a), fam.domain.h)
    f_hi = obj(hi)
    while sign * f_hi < 0:
        lo, hi = hi, 2 * hi
        if abs(hi) > MAX_TIME:
            raise OutOfRange(f"transfer {a} not reached by the engulfing family")
        f_hi = obj(hi)
    if f_hi == 0:
        return hi
    t = brentq(obj, min(lo, hi), max(lo, hi), xtol=1e-300, rtol=4 * np.finfo(float).eps,
               maxiter=400)
    err = abs(obj(t))
    if err > tol * max(1.0, abs(a)):
        raise NumericalError(f"transfer time residual {err:.3e} exceeds {tol:.1e}")
    return float(t)


def engulf_transfer(mu: DensityField, a: float, fam: EngulfFamily, s: float = 1.0,
                    pre: DiffeoMap | None = None) -> DiffeoMap:
    """H = f_t^-1 moving mass s * a into L (after ``pre`` when given)."""
    if not 0.0 <= s <= 1.0:
        raise PreconditionError(f"homotopy parameter s must lie in [0, 1], got {s}")
    target = s * a
    if target == 0:
        return DiffeoMap.identity(fam.domain)
    return fam.h_map(transfer_time(mu, target, fam, pre))


# ---------------------------------------------------------------------------
# component balancing


def _measure_of(mu, pre, R):
    return mass(mu, R if pre is None else preimage(pre, R))


def _check_decomposition(N: Region, parts: list):
    seen = N
    for i, A in enumerate(parts):
        if len(components(A)) != 1:
            raise PreconditionError(f"part {i + 1} is not connected")
        if not (A & seen).is_empty():
            raise PreconditionError(f"part {i + 1} overlaps N or an earlier part")
        seen = seen | A
    if len(components(seen)) != 1:
        raise PreconditionError("N and its parts do not form a connected region")
    return seen


def balance_components(mu: DensityField, N: Region, parts: list, targets: list,
                       pre: DiffeoMap | None = None) -> DiffeoMap:
    """phi with J(phi^-1 A_i, A_i) = targets[i] (A_0 = N), all moves inside N and the parts.

    With ``pre`` the transfers are measured for pre_* mu and the returned map is
    the composite phi o pre, sampled exactly as the transfers were solved.
    """
    d = N.domain
    targets = [float(v) for v in targets]
    if len(targets) != len(parts) + 1:
        raise PreconditionError(f"need {len(parts) + 1} targets, got {len(targets)}")
    _check_decomposition(N, parts)
    scale = max(1.0, sum(abs(v) for v in targets))
    total = sum(targets)
    if abs(total) > SUM_TOL * scale:
        raise InfeasibleTargets(f"targets must sum to 0, sum is {total:.3e}")
    for i, (R, v) in enumerate(zip([N] + list(parts), targets)):
        m = _measure_of(mu, pre, R)
        if not v > -m + MARGIN:
            raise InfeasibleTargets(f"target {i} = {v} does not exceed minus the mass {m}")
    base = DiffeoMap.identity(d) if pre is None else pre
    if all(v == 0 for v in targets):
        return base
    return _balance(mu, N, list(parts), targets, base)


def _balance(mu, N, parts, targets, base):
    if len(parts) == 1:
        P = base
    else:
        P = _balance(mu, N | parts[0], parts[1:], [targets[0] + targets[1]] + targets[2:], base)
    A = parts[0]
    fam = engulf_family(N.domain, A, support=N | A)
    ref = preimage(P, A)
    done = j_transfer(mu, ref, preimage(base, A))
    remaining = targets[1] - done
    if abs(remaining) <= NOISE_FLOOR * max(1.0, abs(targets[1])):
        return P
    t = transfer_time(mu, remaining, fam, pre=None if P.is_identity() else P)
    return compose(fam.h_map(t), P)


# ---------------------------------------------------------------------------
# allocation functionals


@dataclass(frozen=True, eq=False)
class AllocationFunctional:
    """a(f, g; C) for the volume or charge matching problem."""

    tag: str
    mu: DensityField
    nu: DensityField | None = None
    charge: EndCharge | None = None

    @property
    def g_measure(self) -> DensityField:
        return self.nu if self.tag == "volume" else self.mu

    def in_class(self, C: Region) -> bool:
        if self.tag == "charge":
            return True
        return math.isfinite(mass(self.mu, C))

    def value(self, f: DiffeoMap, g: DiffeoMap, C: Region) -> float:
        if self.tag == "volume":
            if not self.in_class(C):
                raise PreconditionError("region has infinite mass; outside the functional's class")
            return mass(self.nu, preimage(g, C)) - mass(self.mu, preimage(f, C))
        return self.charge.value(C.tails) - j_transfer(self.mu, preimage(f, C), preimage(g, C))

    def self_test(self, rng=None, samples: int = 3) -> dict:
        """Sampled check of the axioms; returns axiom name -> bool."""
        return _axiom_test(self, np.random.default_rng(rng), samples)


def _probe_maps(d: Domain, rng, count: int) -> list:
    ident = DiffeoMap.identity(d)
    if not d.noncompact:
        return [ident]
    T = d.truncation
    lo = 0.0 if d.kind == "half_line" else -T
    maps = [ident]
    for _ in range(count):
        c = d.snap(lo + (T - lo) * rng.uniform(0.4, 0.6))
        fam = engulf_family(d, _domain.slab(d, c, math.inf))
        maps.append(fam.map(float(rng.uniform(-0.1, 0.1)) * (T - lo)))
    return maps


def _axiom_test(F: AllocationFunctional, rng, samples: int) -> dict:
    d = F.mu.domain
    res = {}
    full = Region.full(d)
    res["*4"] = (not F.in_class(full)) or F.value(DiffeoMap.identity(d),
                                                   DiffeoMap.identity(d), full) == 0.0
    if not d.noncompact:
        return {**res, "*0": True, "*1": True, "*2": True, "*3": True}
    ex = standard_exhaustion(d, 1)
    K, L = ex.level(1)
    regions = [K] + components(K.complement()) + components(L - K) + components(L.complement())
    maps = _probe_maps(d, rng, samples)
    ok0 = ok1 = ok2 = ok3 = True
    g_meas = F.g_measure
    for C in regions:
        if not F.in_class(C):
            ok0 &= math.isinf(mass(F.mu, C)) and math.isinf(mass(g_meas, C))
            continue
        for f in maps:
            for g in maps[:2]:
                v = F.value(f, g, C)
                lo, hi = -mass(F.mu, preimage(f, C)), mass(g_meas, preimage(g, C))
                ok1 &= lo < v < hi
                f2 = maps[-1]
                v2 = F.value(f2, g, C)
                jj = j_transfer(F.mu, preimage(f, C), preimage(f2, C))
                ok2 &= abs(v2 - v - jj) <= 1e-9 * max(1.0, abs(v), abs(v2))
                g2 = maps[-1]
                w2 = F.value(f, g2, C)
                jg = j_transfer(g_meas, preimage(g, C), preimage(g2, C))
                ok2 &= abs(w2 - v + jg) <= 1e-9 * max(1.0, abs(v), abs(w2))
    for A in components(K.complement()):
        outer = components(A & L.complement())
        if all(F.in_class(B) for B in outer):
            ok3 &= F.in_class(A)
            for f in maps:
                lhs = F.value(f, maps[0], A & L) + sum(F.value(f, maps[0], B) for B in outer)
                ok3 &= abs(lhs - F.value(f, maps[0], A)) <= 1e-9 * max(1.0, abs(lhs))
    res.update({"*0": bool(ok0), "*1": bool(ok1), "*2": bool(ok2), "*3": bool(ok3)})
    return res


def _check_volume_data(mu: DensityField, nu: DensityField):
    mu.domain.require_same(nu.domain)
    fm, fn = finite_ends(mu), finite_ends(nu)
    if fm != fn:
        raise EndSetMismatch(
            f"finite-mass end sets differ; symmetric difference {sorted(fm ^ fn)}")
    for e in sorted(fm):
        a, b = mu.tails[e].total(), nu.tails[e].total()
        if abs(a - b) > 1e-12 * max(a, b):
            raise MassMismatch(f"tail masses toward {e} differ: {a!r} vs {b!r}")
    a, b = float(mu.cell_masses().sum()), float(nu.cell_masses().sum())
    if abs(a - b) > 1e-9 * max(1.0, a):
        raise MassMismatch(f"total masses differ: {a!r} vs {b!r}")


def make_functional(tag: str, data, self_test: bool = True, rng=0) -> AllocationFunctional:
    """Volume tag: data = (mu, nu).  Charge tag: data = (mu, charge)."""
    if tag == "volume":
        mu, nu = data
        _check_volume_data(mu, nu)
        F = AllocationFunctional("volume", mu, nu=nu)
    elif tag == "charge":
        mu, a = data
        ok, report = validate_charge(a, mu)
        if not ok:
            raise PreconditionError("charge not admissible: " + "; ".join(report))
        F = AllocationFunctional("charge", mu, charge=a)
    else:
        raise PreconditionError(f"unknown functional tag {tag!r}")
    if self_test:
        bad = [k for k, v in F.self_test(rng).items() if not v]
        if bad:
            raise PreconditionError(f"functional violates axiom(s) {bad}")
    return F


# ---------------------------------------------------------------------------
# stages and pipelines


def _side_targets(F, f, g, N, parts, negate):
    vals = [F.value(f, g, N)]
    fin = []
    for A in parts:
        fin.append(F.in_class(A))
        vals.append(F.value(f, g, A) if fin[-1] else 0.0)
    m = sum(1 for x in fin if not x)
    if m:
        fill = -sum(vals) / m
        vals = [v if i == 0 or fin[i - 1] else fill for i, v in enumerate(vals)]
    vals = [0.0 if v == 0 else v for v in vals]
    return [-v for v in vals] if negate else vals


def stage_balance(fprev: DiffeoMap, gprev: DiffeoMap, K: Region, Lprev: Region,
                  F: AllocationFunctional, L: Region):
    """One stage: balance f on components of Lprev^c, then g on components of K^c."""
    f = fprev
    for B in components(Lprev.complement()):
        N = B & K
        parts = components(B - K)
        targets = _side_targets(F, f, gprev, N, parts, negate=False)
        if all(v == 0 for v in targets):
            continue
        f = balance_components(F.mu, N, parts, targets, pre=f)
    g = gprev
    for B in components(K.complement()):
        N = B & L
        parts = components(B - L)
        targets = _side_targets(F, f, g, N, parts, negate=True)
        if all(v == 0 for v in targets):
            continue
        g = balance_components(F.g_measure, N, parts, targets, pre=g)
    return f, g


def stage_residuals(F: AllocationFunctional, f, g, ex, k: int, gprev) -> dict:
    """|a(f^k, g^(k-1); C)| and |a(f^k, g^k; C)| over the classes the stage balances."""
    K, L = ex.level(k)
    Lp = ex.L_prev(k)
    first = components(K - Lp) + [A for A in components(K.complement()) if F.in_class(A)]
    second = components(L - K) + [A for A in components(L.complement()) if F.in_class(A)]
    r1 = max((abs(F.value(f, gprev, C)) for C in first), default=0.0)
    r2 = max((abs(F.value(f, g, C)) for C in second), default=0.0)
    return {"f_step": r1, "g_step": r2}


def _block_correct(mu_s: DensityField, nu_s: DensityField, ex) -> tuple:
    """Copy nu beyond the last level and rescale block masses of mu_s onto nu_s."""
    from .moser import Box, _block_ranges, _interior_bump

    d = mu_s.domain
    ax = d.axial
    x = d.coords(ax)
    ranges = _block_ranges(ex)
    s = mu_s.samples.copy()
    lo_all = min(r[0] for r in ranges)
    hi_all = max(r[1] for r in ranges)
    outside = np.ones(x.size, bool)
    outside[lo_all + 1:hi_all] = False
    sel = [slice(None)] * d.dim
    sel[ax] = outside
    beyond = float(np.abs(s[tuple(sel)] - nu_s.samples[tuple(sel)]).max())
    s[tuple(sel)] = nu_s.samples[tuple(sel)]
    box = Box.from_domain(d)
    worst = 0.0
    for a, b in ranges:
        bsel = [slice(None)] * d.dim
        bsel[ax] = slice(a, b + 1)
        sub = Box(tuple(box.coords[k] if k != ax else x[a:b + 1] for k in range(d.dim)),
                  tuple(box.periodic[k] if k != ax else False for k in range(d.dim)))
        delta = sub.integrate(nu_s.samples[tuple(bsel)]) - sub.integrate(s[tuple(bsel)])
        bp = _interior_bump(d, a, b)[tuple(bsel)]
        s[tuple(bsel)] += delta * bp / sub.integrate(bp)
        worst = max(worst, abs(delta))
    if s.min() <= 0:
        raise NumericalError("block mass correction lost positivity")
    return DensityField(d, s, nu_s.tails), {"beyond_last_level": beyond, "block_correction": worst}


def _run_stages(F: AllocationFunctional, ex) -> tuple:
    d = F.mu.domain
    f = g = DiffeoMap.identity(d)
    stages = []
    for k in range(1, ex.depth + 1):
        K, L = ex.level(k)
        gprev = g
        f, g = stage_balance(f, g, K, ex.L_prev(k), F, L)
        stages.append(stage_residuals(F, f, g, ex, k, gprev))
    return f, g, stages


def _assemble(F, f, g, ex, mu_f, nu_g, steps):
    if f.is_identity() and g.is_identity() and mu_f.equals(nu_g):
        return DiffeoMap.identity(F.mu.domain), {"beyond_last_level": 0.0, "block_correction": 0.0}
    left = pushforward(f, mu_f)
    right = pushforward(g, nu_g)
    if left.equals(right):
        chi, info = DiffeoMap.identity(F.mu.domain), {"beyond_last_level": 0.0,
                                                       "block_correction": 0.0}
    else:
        left, info = _block_correct(left, right, ex)
        chi = piecewise_moser(left, right, ex, steps)
    ginv = invert(g)
    return compose_all(ginv, chi, f), info


def match_volume_forms(mu: DensityField, nu: DensityField, depth: int, radii=None,
                       steps: int = 64):
    """h with h_* mu = nu (up to discretization), identity when mu = nu."""
    t0 = time.perf_counter()
    F = make_functional("volume", (mu, nu))
    d = mu.domain
    if mu.equals(nu):
        return DiffeoMap.identity(d), {"stages": [], "residual": 0.0, "runtime_ms": 0.0}
    ex = standard_exhaustion(d, depth, radii)
    f, g, stages = _run_stages(F, ex)
    h, info = _assemble(F, f, g, ex, mu, nu, steps)
    res = float(np.abs(pushforward(h, mu).samples - nu.samples).max())
    report = {"stages": stages, "residual": res, "tolerance": 50 * d.h ** 2,
              "runtime_ms": 1e3 * (time.perf_counter() - t0), **info}
    return h, report


def _realize_once(omega, a, ex, repair, steps):
    F = make_functional("charge", (omega, a), self_test=False)
    f, g, stages = _run_stages(F, ex)
    h, info = _assemble(F, f, g, ex, omega, omega, steps)
    if repair and not h.is_identity():
        pushed = pushforward(h, omega)
        if not pushed.equals(omega):
            fixed, more = _block_correct(pushed, omega, ex)
            h = compose(piecewise_moser(fixed, omega, ex, steps), h)
            info["repair_block_correction"] = more["block_correction"]
    return h, stages, info


def realize_end_charge(omega: DensityField, a: EndCharge, depth: int, t: float = 1.0,
                       path_samples: int = 3, repair: bool = True, radii=None, steps: int = 64):
    """h preserving omega (up to discretization) whose end charge is t * a."""
    t0 = time.perf_counter()
    d = omega.domain
    a.domain.require_same(d)
    if not 0.0 <= t <= 1.0:
        raise PreconditionError(f"path parameter t must lie in [0, 1], got {t}")
    F = make_functional("charge", (omega, a))
    del F
    ex = standard_exhaustion(d, depth, radii)
    target = EndCharge(d, {e: t * v for e, v in a.values.items()})
    h, stages, info = _realize_once(omega, target, ex, repair, steps)
    times = np.linspace(0.0, 1.0, max(path_samples, 2))
    maps = []
    for s in times:
        if s == 0:
            maps.append(DiffeoMap.identity(d))
        elif s == 1:
            maps.append(h)
        else:
            part = EndCharge(d, {e: s * v for e, v in target.values.items()})
            maps.append(_realize_once(omega, part, ex, repair, steps)[0])
    path = IsotopyPath(tuple(float(s) for s in times), tuple(maps))
    realized = end_charge_of(h, omega)
    report = {
        "stages": stages,
        "target": target.values,
        "realized": realized.values,
        "charge_error": max((abs(realized[e] - target[e]) for e in d.end_ids), default=0.0),
        "preservation_residual": preservation_residual(h, omega),
        "preservation_budget": preservation_budget(omega),
        "path_charges": [end_charge_of(m, omega).values for m in maps],
        "runtime_ms": 1e3 * (time.perf_counter() - t0),
        **info,
    }
    return h, path, report


def sup_compactified_displacement(h: DiffeoMap) -> float:
    """Largest distance between a node and its image in the end compactification."""
    d = h.domain
    pts = np.stack(d.node_grid()).reshape(d.dim, -1)
    img = h.values.reshape(d.dim, -1)
    if d.dim == 1 and not d.noncompact:
        return float(np.abs(img - pts).max())
    a = _domain._embed(d, pts)
    b = _domain._embed(d, img)
    return float(np.sqrt(((a - b) ** 2).sum(0)).max())
