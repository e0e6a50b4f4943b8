"""Invariant suites behind `verify`; one function per acceptance criterion.

Every check returns records {"name", "value", "tol", "pass"} so reports and
tests can state exactly what was measured against which tolerance.
"""

from __future__ import annotations

import math
import os
import time

import numpy as np

from . import profiles as P
from .domain import Region, build_domain, slab
from .ends import (EndCharge, end_charge_of, preservation_budget, preservation_residual,
                   validate_charge)
from .errors import PreconditionError
from .fields import (DensityField, DiffeoMap, TailModel, compose, invert, j_transfer, mass, preimage,
                     pushforward)
from .moser import (Box, MoserProblem, cdf_transport_1d, cell_average, exterior_derivative,
                    moser_flow_solve, primitive, smoothstep)
from .transfer import (balance_components, engulf_family, engulf_transfer, lambda_of,
                       match_volume_forms, realize_end_charge)

SUITES = ("j", "moser", "charge", "transfer", "all")


def seed_from_env(default=None):
    raw = os.environ.get("MT_SEED")
    return int(raw) if raw not in (None, "") else (P.DEFAULT_SEED if default is None else default)


def _rec(name, value, tol, ok=None):
    value = float(value)
    ok = (value <= tol) if ok is None else bool(ok)
    return {"name": name, "value": value, "tol": float(tol), "pass": bool(ok)}


def _flag(name, ok):
    return {"name": name, "value": 0.0 if ok else 1.0, "tol": 0.0, "pass": bool(ok)}


# ---------------------------------------------------------------------------
# criteria 1-3: Moser solver, 1D uniqueness, primitive


def _moser_runs(seed, cache={}):
    if seed not in cache:
        runs = []
        for name, mu, nu, eps in P.moser_pairs(seed):
            t0 = time.perf_counter()
            psi, _ = moser_flow_solve(MoserProblem(mu, nu, eps))
            runs.append((name, mu, nu, eps, psi, time.perf_counter() - t0))
        cache.clear()
        cache[seed] = runs
    return cache[seed]


def criterion_1(seed):
    out = []
    for name, mu, nu, eps, psi, dt in _moser_runs(seed):
        d = mu.domain
        res = np.abs(pushforward(psi, mu).samples - nu.samples).max()
        out.append(_rec(f"{name} pushforward residual", res, 50 * d.h ** 2))
        box = Box.from_domain(d)
        collar = np.abs(psi.disp[:, box.collar_mask(eps)]).max(initial=0.0)
        out.append(_rec(f"{name} collar displacement", collar, 0.0))
        if d.dim == 2:
            out.append(_rec(f"{name} runtime s", dt, 10.0))
        same, _ = moser_flow_solve(MoserProblem(mu, mu, eps))
        out.append(_flag(f"{name} mu = nu gives identity", same.is_identity()))
    return out


def criterion_2(seed):
    out = []
    for name, mu, nu, eps, psi, _ in _moser_runs(seed):
        if mu.domain.dim != 1:
            continue
        ref = cdf_transport_1d(mu, nu)
        out.append(_rec(f"{name} sup |moser - cdf|", np.abs(psi.disp - ref.disp).max(), 1e-4))
    return out


def criterion_3(seed, count: int = 100):
    rng = P.rng_from(seed)
    out = []
    doms = [build_domain(kind="interval", nodes=1024), build_domain(kind="rectangle", nodes=128),
            build_domain(kind="torus", nodes=128)]
    worst = {}
    for i in range(count):
        d = doms[0] if i < count // 2 else doms[1 + i % 2]
        box = Box.from_domain(d)
        w = P.random_deficit(d, rng, 0.15 if d.dim == 1 else 0.2)
        beta = primitive(w, box)
        err = np.abs(exterior_derivative(beta) - cell_average(w, box)).max()
        worst[d.kind] = max(worst.get(d.kind, 0.0), err)
    for d in doms:
        out.append(_rec(f"{d.kind} max |d beta - w| over deficits", worst[d.kind], 10 * d.h ** 2))
        zero = primitive(np.zeros(d.node_shape), Box.from_domain(d))
        out.append(_flag(f"{d.kind} primitive(0) == 0", not zero.values.any()))
    return out


# ---------------------------------------------------------------------------
# criterion 4: transfer functional identities


# collar next to a decaying end where the window density continues the exponential
# tail exactly, so collar shifts up to TAIL_EXACT push the tail model forward exactly
TAIL_EXACT, TAIL_BLEND = 1.8, 1.5


def _random_field(d, rng):
    s = np.full(d.node_shape, 1.0)
    if d.noncompact:
        reach = d.truncation - TAIL_EXACT - TAIL_BLEND
    for _ in range(3):
        if d.noncompact:
            r = float(rng.uniform(0.5, min(1.2, 0.5 * reach)))
            lo = r if d.kind == "half_line" else -(reach - r)
            c = [rng.uniform(0, 2 * math.pi)] * (d.dim - 1) + [rng.uniform(lo, reach - r)]
            r = [1.5] * (d.dim - 1) + [r]
        else:
            c = rng.uniform(0.15, 0.85, size=d.dim)
            r = 0.12
        s = s + rng.uniform(-0.3, 0.6) * P.bump_at(d, c, r)
    rate = float(rng.uniform(0.5, 2.0))
    s = s * rate
    tails = {}
    u = d.node_grid()[d.axial]
    for e in d.ends:
        if rng.uniform() < 0.5:
            tails[e.id] = TailModel.constant(rate)
            continue
        decay = float(rng.uniform(0.3, 0.8))
        tails[e.id] = TailModel.decaying(rate * d.cross_measure / decay, decay)
        v = d.truncation - e.sign * u
        s = s * np.exp(decay * v * (1.0 - smoothstep((v - TAIL_EXACT) / TAIL_BLEND)))
    return DensityField(d, s, tails)


def _random_region(d, rng):
    """Random union of one or two axial slabs (cell aligned)."""
    x = d.coords(d.axial)
    lo, hi = x[0], x[-1]
    pieces = []
    for _ in range(rng.integers(1, 3)):
        a, b = np.sort(rng.uniform(lo - 0.3 * (hi - lo), hi + 0.3 * (hi - lo), size=2))
        pieces.append((a if a > lo else -math.inf, b if b < hi else math.inf))
    R = Region.empty(d)
    for a, b in pieces:
        R = R | slab(d, a, b)
    return R


def _random_map(d, rng):
    if d.noncompact:
        if d.kind == "half_line":
            fam = engulf_family(d, slab(d, d.snap(rng.uniform(2, 8)), math.inf))
            return fam.map(float(rng.uniform(-1.5, 1.5)))
        return P.admissible_map(d, rng, 1.5)
    x = d.coords(0)
    v = x + 0.02 * np.sin(2 * math.pi * x) * rng.uniform(-1, 1)
    return DiffeoMap.from_values(d, v)


def criterion_4(seed, count: int = 200):
    rng = P.rng_from(seed)
    doms = [P.line(), P.half_line(), P.cylinder(), build_domain(kind="interval", nodes=1024)]
    worst = {k: 0.0 for k in ("mass split", "cocycle", "additivity", "naturality")}
    tols = {}
    checked = {k: 0 for k in worst}
    for i in range(count):
        d = doms[i % len(doms)]
        tol = 10 * d.h ** 2
        mu = _random_field(d, rng)
        A, B, C = (_random_region(d, rng) for _ in range(3))
        h = _random_map(d, rng)
        try:
            jab = j_transfer(mu, A, B)
        except PreconditionError:
            jab = None
        if jab is not None:
            ma, mb = mass(mu, A), mass(mu, B)
            if math.isfinite(ma):
                err = abs(ma - (jab + mb))
                worst["mass split"] = max(worst["mass split"], err / tol)
                checked["mass split"] += 1
            try:
                jbc, jac = j_transfer(mu, B, C), j_transfer(mu, A, C)
                worst["cocycle"] = max(worst["cocycle"], abs(jab + jbc - jac) / tol)
                checked["cocycle"] += 1
            except PreconditionError:
                pass
        # additivity: disjoint pairs A1, B1 and C1, D1 with finite differences
        A1, C1 = A - C, C - A
        B1, D1 = (B - A) - C, (B - C) - A
        try:
            lhs = j_transfer(mu, A1 | B1, C1 | D1)
            rhs = j_transfer(mu, A1, C1) + j_transfer(mu, B1, D1)
            worst["additivity"] = max(worst["additivity"], abs(lhs - rhs) / tol)
            checked["additivity"] += 1
        except PreconditionError:
            pass
        # naturality: pushforward vs preimages
        if jab is not None:
            pushed = pushforward(h, mu)
            lhs = j_transfer(pushed, A, B)
            rhs = j_transfer(mu, preimage(h, A), preimage(h, B))
            worst["naturality"] = max(worst["naturality"], abs(lhs - rhs) / tol)
            checked["naturality"] += 1
        tols[d.kind] = tol
    out = []
    for k in worst:
        out.append(_rec(f"identity {k} worst error / 10h^2 over {checked[k]} triples", worst[k], 1.0))
        out.append(_flag(f"identity {k} exercised", checked[k] > 0))
    return out


# ---------------------------------------------------------------------------
# criterion 5: end charges


def criterion_5(seed, pairs: int = 50):
    rng = P.rng_from(seed)
    out = []
    dl = P.line()
    om = P.density(dl, np.ones(dl.node_shape))
    worst = 0.0
    for s in (-3.0, -0.5, 0.1, 1.0, 2.5, 5.0):
        c = end_charge_of(P.translation(dl, s), om)
        worst = max(worst, abs(c["e+"] - s), abs(c["e-"] + s))
    out.append(_rec("translation charge vs (s, -s)", worst, 1e-8))
    doms = [dl, P.cylinder()]
    worst_h = worst_rep = worst_c = worst_inv = 0.0
    valid = True
    for i in range(pairs):
        d = doms[i % 2]
        om = P.density(d, np.ones(d.node_shape))
        budget = preservation_budget(om)
        g, h = P.admissible_map(d, rng, 1.5), P.admissible_map(d, rng, 1.5)
        gh = compose(g, h)
        cg, ch, cgh = (end_charge_of(m, om) for m in (g, h, gh))
        for e in d.end_ids:
            worst_h = max(worst_h, abs(cgh[e] - cg[e] - ch[e]) / (2 * budget))
        c1 = end_charge_of(h, om, offset=1.0)
        worst_rep = max(worst_rep, max(abs(c1[e] - ch[e]) for e in d.end_ids) / (10 * d.h ** 2))
        cinv = end_charge_of(invert(h), om)
        worst_inv = max(worst_inv, max(abs(cinv[e] + ch[e]) for e in d.end_ids) / (2 * budget))
        valid &= abs(ch.total()) <= 2 * budget
        k = P.compact_map(d, rng)
        ck = end_charge_of(k, om)
        worst_c = max(worst_c, max((abs(ck[e]) for e in d.end_ids), default=0.0))
        pres = preservation_residual(k, om)
        worst_c = max(worst_c, 0.0 if pres <= budget else math.inf)
    out.append(_rec(f"homomorphism error / (2 budget) over {pairs} pairs", worst_h, 1.0))
    out.append(_rec("representative independence error / 10h^2", worst_rep, 1.0))
    out.append(_rec("inverse charge error / (2 budget)", worst_inv, 1.0))
    out.append(_flag("charges of admissible maps sum to zero", valid))
    out.append(_rec("compactly supported preserving maps: max |charge|", worst_c, 1e-6))
    return out


# ---------------------------------------------------------------------------
# criteria 6-9: engulfing, balancing, pipelines


def _engulf_case(rng, i):
    if i % 3 == 0:
        d = P.line()
        mu = _random_field(d, rng)
        c = d.snap(rng.uniform(-3, 3))
        L = slab(d, -math.inf, c) if rng.uniform() < 0.5 else slab(d, c, math.inf)
        fam = engulf_family(d, L)
    elif i % 3 == 1:
        d = P.half_line()
        mu = _random_field(d, rng)
        c = d.snap(rng.uniform(3, 7))
        fam = engulf_family(d, slab(d, c, math.inf))
    else:
        d = P.cylinder()
        mu = _random_field(d, rng)
        w, c = d.snap(rng.uniform(-3, -1)), d.snap(rng.uniform(0, 2))
        fam = engulf_family(d, slab(d, c, math.inf), support=slab(d, w, math.inf))
    return d, mu, fam


def _reachable(mu, fam, rng):
    mL, mN = mass(mu, fam.L), mass(mu, fam.N)
    # stay clear of the identity gap next to a wall
    lo = -min(mL, 50.0) * 0.8 if math.isfinite(mL) else -5.0
    hi = min(mN, 50.0) * 0.8 if math.isfinite(mN) else 5.0
    if fam.wall is not None:
        inner = fam.N if fam.wall_side * fam.grow < 0 else fam.L
        span = fam.width * 0.8
        if inner is fam.N:
            hi = min(hi, span)
        else:
            lo = max(lo, -span)
    return float(rng.uniform(lo, hi))


def criterion_6(seed, count: int = 50):
    rng = P.rng_from(seed)
    worst = 0.0
    ident_ok = mono_ok = True
    scale_worst = 0.0
    for i in range(count):
        d, mu, fam = _engulf_case(rng, i)
        a = _reachable(mu, fam, rng)
        H = engulf_transfer(mu, a, fam)
        worst = max(worst, abs(j_transfer(mu, preimage(H, fam.L), fam.L) - a))
        ident_ok &= (not H.is_identity()) and engulf_transfer(mu, 0.0, fam).is_identity()
        if i < 10:
            ts = np.linspace(-3, 3, 100)
            lam = np.array([lambda_of(mu, fam, t) for t in ts])
            mono_ok &= bool(np.all(np.diff(lam) > 0)) and lambda_of(mu, fam, 0.0) == 0.0
            for s in (0.0, 0.25, 0.5, 1.0):
                Hs = engulf_transfer(mu, a, fam, s=s)
                got = 0.0 if Hs.is_identity() else j_transfer(mu, preimage(Hs, fam.L), fam.L)
                scale_worst = max(scale_worst, abs(got - s * a))
    return [
        _rec(f"max |J(H^-1 L, L) - a| over {count} cases", worst, 1e-8),
        _flag("H = id iff a = 0", ident_ok),
        _flag("lambda strictly increasing on 100-point grids", mono_ok),
        _rec("homotopy s -> s a at s in {0, 1/4, 1/2, 1}", scale_worst, 1e-8),
    ]


def _balance_residual(mu, phi, N, parts, targets):
    errs = []
    for R, a in zip([N] + parts, targets):
        got = 0.0 if phi.is_identity() else j_transfer(mu, preimage(phi, R), R)
        errs.append(abs(got - a))
    return max(errs)


def criterion_7(seed):
    rng = P.rng_from(seed)
    out = []
    dl, dc = P.line(), P.cylinder()
    for d in (dl, dc):
        mu = _random_field(d, rng) if d is dl else P.density(d, np.ones(d.node_shape))
        r = 1.0 if d is dl else 0.8
        N = slab(d, -r, r)
        up, down = slab(d, r, math.inf), slab(d, -math.inf, -r)
        a = [-0.2, 0.5, -0.3]
        phi = balance_components(mu, N, [up, down], a)
        err2 = _balance_residual(mu, phi, N, [up, down], a)
        out.append(_rec(f"{d.kind} m=2 balancing residual", err2, 1e-7))
        cons = abs(j_transfer(mu, preimage(phi, N), N)
                   + sum(j_transfer(mu, preimage(phi, A), A) for A in (up, down)))
        out.append(_rec(f"{d.kind} m=2 consistency J(N) + sum J(A_i)", cons, 1e-7))
        b = float(rng.uniform(0.2, 0.8))
        Nh = slab(d, -math.inf, r)
        phi1 = balance_components(mu, Nh, [up], [-b, b])
        err1 = _balance_residual(mu, phi1, Nh, [up], [-b, b])
        out.append(_rec(f"{d.kind} m=1 balancing residual", err1, 1e-7))
        H = engulf_transfer(mu, b, engulf_family(d, up))
        out.append(_rec(f"{d.kind} m=1 agrees with engulf_transfer",
                        np.abs(H.disp - phi1.disp).max(), 1e-12))
        zero = balance_components(mu, N, [up, down], [0.0, 0.0, 0.0])
        out.append(_flag(f"{d.kind} zero targets give identity", zero.is_identity()))
    return out


def criterion_8(seed, factor_count: int = 10):
    rng = P.rng_from(seed)
    out = []
    for d in (P.line(), P.cylinder()):
        om = P.density(d, np.ones(d.node_shape))
        for s in (0.1, 1.0, 5.0):
            a = EndCharge(d, {"e+": s, "e-": -s})
            h, path, rep = realize_end_charge(om, a, 2, path_samples=2)
            out.append(_rec(f"{d.kind} s={s} charge error", rep["charge_error"], 1e-6))
            out.append(_rec(f"{d.kind} s={s} preservation residual", rep["preservation_residual"],
                            rep["preservation_budget"]))
        h0, _, _ = realize_end_charge(om, EndCharge.zero(d), 2, path_samples=2)
        out.append(_flag(f"{d.kind} zero charge gives identity", h0.is_identity()))
    worst = 0.0
    doms = [P.line(), P.cylinder()]
    for i in range(factor_count):
        d = doms[i % 2]
        om = P.density(d, np.ones(d.node_shape))
        h = P.admissible_map(d, rng, 1.5)
        c = end_charge_of(h, om)
        c = EndCharge(d, {"e+": c["e+"], "e-": -c["e+"]})
        sec, _, _ = realize_end_charge(om, c, 2, path_samples=2)
        k = compose(invert(sec), h)
        ck = end_charge_of(k, om)
        worst = max(worst, max(abs(ck[e]) for e in d.end_ids))
    out.append(_rec(f"factorization h = s(c_h) o k: max |charge(k)| over {factor_count}", worst, 1e-5))
    return out


def _mismatch_exit_code() -> int:
    """matchforms on a pair whose e+ end is infinite for mu but finite for nu."""
    import tempfile

    from . import io as fio
    from .cli import main

    d = P.line()
    mu = P.density(d, np.ones(d.node_shape))
    nu = DensityField(d, np.ones(d.node_shape),
                      {"e-": TailModel.constant(1.0), "e+": TailModel.decaying(2.0, 0.5)})
    with tempfile.TemporaryDirectory() as tmp:
        fio.save_field(os.path.join(tmp, "mu.bin"), mu)
        fio.save_field(os.path.join(tmp, "nu.bin"), nu)
        return main(["matchforms", "--mu", os.path.join(tmp, "mu.bin"), "--nu",
                     os.path.join(tmp, "nu.bin"), "--depth", "2",
                     "--out", os.path.join(tmp, "h.bin")])


def criterion_9(seed):
    out = []
    for name, mu, nu in P.volume_pairs(seed):
        h, rep = match_volume_forms(mu, nu, 2)
        out.append(_rec(f"{name} residual", rep["residual"], rep["tolerance"]))
    d = P.line()
    mu = P.density(d, np.ones(d.node_shape))
    h, _ = match_volume_forms(mu, mu, 2)
    out.append(_flag("mu = nu gives identity", h.is_identity()))
    code = _mismatch_exit_code()
    out.append(_flag(f"mismatched finite ends rejected with exit 2 (got {code})", code == 2))
    return out


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9}
GROUPS = {"moser": (1, 2, 3), "j": (4,), "charge": (5,), "transfer": (6, 7, 8, 9)}


def run_suite(name: str, seed=None) -> dict:
    """Run a named suite; returns {"suite", "seed", "criteria": {k: records}, "pass", "runtime_s"}."""
    if name not in SUITES:
        raise PreconditionError(f"unknown suite {name!r}; expected one of {SUITES}")
    seed = seed_from_env() if seed is None else seed
    keys = sorted(CRITERIA) if name == "all" else GROUPS[name]
    t0 = time.perf_counter()
    crit = {}
    timing = {}
    for k in keys:
        t1 = time.perf_counter()
        crit[str(k)] = CRITERIA[k](seed)
        timing[str(k)] = time.perf_counter() - t1
    ok = all(r["pass"] for recs in crit.values() for r in recs)
    return {"suite": name, "seed": seed, "criteria": crit, "pass": ok,
            "timing_s": timing, "runtime_s": time.perf_counter() - t0}
