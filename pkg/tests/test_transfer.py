import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact import profiles as P
from artifact.domain import Region, slab, standard_exhaustion
from artifact.ends import EndCharge, end_charge_of
from artifact.errors import EndSetMismatch, OutOfRange, PreconditionError
from artifact.fields import DensityField, DiffeoMap, TailModel, j_transfer, preimage, pushforward
from artifact.transfer import (balance_components, engulf_family, engulf_transfer, lambda_of,
                               make_functional, match_volume_forms, ramp, ramp_time,
                               ramp_time_inverse, realize_end_charge, stage_balance,
                               stage_residuals, sup_compactified_displacement, transfer_time)

LINE = P.line()
CYL = P.cylinder()
LEB = P.density(LINE, np.ones(LINE.node_shape))


def moved(mu, H, R):
    return 0.0 if H.is_identity() else j_transfer(mu, preimage(H, R), R)


def test_ramp_time_matches_quadrature():
    from scipy.integrate import quad

    for s in (0.05, 0.3, 0.7, 0.99):
        want, _ = quad(lambda v: 1.0 / ramp(v), s, 1.0, limit=200)
        got = float(ramp_time(np.array([s]))[0])
        assert got == pytest.approx(want, rel=1e-9), f"Q({s}) = {got} vs {want}"
        back = float(ramp_time_inverse(np.array([got]))[0])
        assert back == pytest.approx(s, rel=1e-10), f"inverse at {s}: {back}"


def test_engulf_frontier_moves_monotonically():
    fam = engulf_family(LINE, slab(LINE, -math.inf, 0))
    ts = np.linspace(-3, 3, 61)
    xs = [fam.frontier_at(t) for t in ts]
    assert fam.frontier_at(0.0) == pytest.approx(0.0, abs=LINE.h)
    assert np.all(np.diff(xs) > 0), "frontier must advance strictly"
    assert fam.frontier_at(1.0) > fam.frontier_at(0.0) > fam.frontier_at(-1.0)


def test_engulf_nesting():
    L = slab(LINE, -math.inf, 0)
    fam = engulf_family(LINE, L)
    small = preimage(fam.map(1.0), L)   # f_-1 (L)
    big = preimage(fam.map(-1.0), L)    # f_1 (L)
    lo_small = small.columns[0][0][1]
    lo_big = big.columns[0][0][1]
    assert lo_small < 0 < lo_big, f"f_-1(L) < L < f_1(L) frontiers: {lo_small}, {lo_big}"


def test_displacement_bounded_in_compactified_metric():
    fam = engulf_family(LINE, slab(LINE, -math.inf, 0))
    sups = [sup_compactified_displacement(fam.map(t)) for t in np.linspace(-10, 10, 21)]
    assert max(sups) <= 2 * math.pi, f"sup displacement {max(sups)}"


def test_lambda_closed_form_and_monotone():
    fam = engulf_family(LINE, slab(LINE, -math.inf, 0))
    assert lambda_of(LEB, fam, 0.0) == 0.0
    for t in (0.5, 1.0, 2.5):
        want = fam.frontier_at(t) - fam.frontier_at(0.0)
        assert lambda_of(LEB, fam, t) == pytest.approx(want, abs=1e-12), f"lambda({t})"
    lam = [lambda_of(LEB, fam, t) for t in np.linspace(-4, 4, 100)]
    assert np.all(np.diff(lam) > 0), "lambda must be strictly increasing"


def test_transfer_time_inverts_lambda():
    fam = engulf_family(LINE, slab(LINE, -math.inf, 0))
    assert transfer_time(LEB, 0.0, fam) == 0.0
    t = transfer_time(LEB, 2.5, fam)
    assert fam.frontier_at(t) - fam.frontier_at(0.0) == pytest.approx(2.5, abs=1e-9)
    mu = DensityField(LINE, 1 + 0.5 * P.bump_at(LINE, [0.5], 2.0), LEB.tails)
    for t in np.linspace(-3, 3, 13):
        back = transfer_time(mu, lambda_of(mu, fam, t), fam)
        assert back == pytest.approx(t, abs=1e-9), f"t = {t}: {back}"


def test_transfer_time_out_of_range_on_finite_side():
    fam = engulf_family(LINE, slab(LINE, 0, 5), support=slab(LINE, 0, math.inf))
    m = float(np.sum(LEB.cell_masses()[fam.L.mask]))
    with pytest.raises(OutOfRange):
        transfer_time(LEB, -m - 1e-3, fam)
    with pytest.raises(OutOfRange):
        transfer_time(LEB, -m + 1e-12, fam)


def test_engulf_transfer_examples():
    L = slab(LINE, -math.inf, 0)
    fam = engulf_family(LINE, L)
    assert engulf_transfer(LEB, 0.0, fam).is_identity()
    H = engulf_transfer(LEB, 1.0, fam)
    assert abs(moved(LEB, H, L) - 1.0) <= 1e-8
    for s in (0.0, 0.5, 1.0):
        got = moved(LEB, engulf_transfer(LEB, 1.0, fam, s=s), L)
        assert abs(got - s) <= 1e-8, f"s = {s}: {got}"


@settings(max_examples=20, deadline=None)
@given(st.floats(-4, 4), st.floats(-3, 3), st.floats(0.2, 0.8), st.booleans())
def test_engulf_transfer_hits_target(a, c, amp, lower):
    mu = DensityField(LINE, 1 + amp * P.bump_at(LINE, [c], 1.5), LEB.tails)
    c = LINE.snap(c)
    L = slab(LINE, -math.inf, c) if lower else slab(LINE, c, math.inf)
    H = engulf_transfer(mu, a, engulf_family(LINE, L))
    assert abs(moved(mu, H, L) - a) <= 1e-8
    assert H.is_identity() == (a == 0.0)


def test_walled_engulf_on_cylinder():
    om = P.density(CYL, np.ones(CYL.node_shape))
    fam = engulf_family(CYL, slab(CYL, 0.5, math.inf), support=slab(CYL, -2, math.inf))
    for a in (-3.0, 2.0, 5.0):
        H = engulf_transfer(om, a, fam)
        assert abs(moved(om, H, fam.L) - a) <= 1e-8, f"a = {a}"


def test_balancing_example():
    N = slab(LINE, -1, 1)
    up, down = slab(LINE, 1, math.inf), slab(LINE, -math.inf, -1)
    targets = [-0.2, 0.5, -0.3]
    phi = balance_components(LEB, N, [up, down], targets)
    for R, a in zip([N, up, down], targets):
        assert abs(moved(LEB, phi, R) - a) <= 1e-7, f"target {a}: {moved(LEB, phi, R)}"
    assert balance_components(LEB, N, [up, down], [0.0, 0.0, 0.0]).is_identity()


def test_balancing_single_part_is_engulfing():
    N, up = slab(LINE, -math.inf, 1), slab(LINE, 1, math.inf)
    phi = balance_components(LEB, N, [up], [-0.7, 0.7])
    H = engulf_transfer(LEB, 0.7, engulf_family(LINE, up))
    assert np.array_equal(phi.disp, H.disp) and phi.shifts == H.shifts


def test_balancing_rejects_bad_targets():
    N, up = slab(LINE, -math.inf, 1), slab(LINE, 1, math.inf)
    with pytest.raises(PreconditionError):
        balance_components(LEB, N, [up], [0.5, 0.7])


def test_functional_examples():
    F = make_functional("volume", (LEB, LEB))
    ident = DiffeoMap.identity(LINE)
    for C in (slab(LINE, -1, 1), slab(LINE, 2, 3)):
        assert F.value(ident, ident, C) == 0.0
    Z = make_functional("charge", (LEB, EndCharge.zero(LINE)))
    assert Z.value(ident, ident, slab(LINE, 0, math.inf)) == 0.0
    A = make_functional("charge", (LEB, EndCharge(LINE, {"e+": 1.0, "e-": -1.0})))
    assert A.value(ident, ident, slab(LINE, 0, math.inf)) == 1.0


def test_functional_axioms_and_cellwise_invariance():
    mu = P.density(LINE, 1 + 0.3 * P.bump_at(LINE, [-1.0], 0.6))
    nu = P.density(LINE, 1 + 0.3 * P.bump_at(LINE, [1.0], 0.6))
    for F in (make_functional("volume", (mu, nu)),
              make_functional("charge", (mu, EndCharge(LINE, {"e+": 0.5, "e-": -0.5})))):
        bad = [k for k, v in F.self_test(rng=3, samples=4).items() if not v]
        assert not bad, f"{F.tag}: failed axioms {bad}"
    # a map moving only points far inside C leaves f^-1(C) and the value unchanged
    F = make_functional("volume", (mu, nu))
    C = slab(LINE, -4, 4)
    ident = DiffeoMap.identity(LINE)
    x = LINE.coords(0)
    wiggle = DiffeoMap.from_values(LINE, x + 0.05 * P.bump_at(LINE, [0.0], 1.0), {"e-": 0.0, "e+": 0.0})
    assert abs(F.value(wiggle, ident, C) - F.value(ident, ident, C)) <= 1e-12


def test_stage_balance_trivial_and_volume():
    ex = standard_exhaustion(LINE, 2)
    F0 = make_functional("volume", (LEB, LEB))
    K, L = ex.level(1)
    f, g = stage_balance(DiffeoMap.identity(LINE), DiffeoMap.identity(LINE), K, ex.L_prev(1), F0, L)
    assert f.is_identity() and g.is_identity()
    mu = P.density(LINE, 1 + 0.3 * P.bump_at(LINE, [-0.5], 0.4))
    nu = P.density(LINE, 1 + 0.3 * P.bump_at(LINE, [3.0], 0.4))
    F = make_functional("volume", (mu, nu))
    ident = DiffeoMap.identity(LINE)
    f, g = stage_balance(ident, ident, K, ex.L_prev(1), F, L)
    res = stage_residuals(F, f, g, ex, 1, ident)
    assert res["f_step"] <= 1e-6 and res["g_step"] <= 1e-6, f"stage residuals {res}"


def test_stage_balance_charge_accounts_for_end_charge():
    ex = standard_exhaustion(LINE, 1)
    K, L = ex.level(1)
    a = EndCharge(LINE, {"e+": 1.0, "e-": -1.0})
    F = make_functional("charge", (LEB, a))
    ident = DiffeoMap.identity(LINE)
    f, g = stage_balance(ident, ident, K, ex.L_prev(1), F, L)
    for A in ex.K_complement_components(1):
        (e,) = A.tails
        got = j_transfer(LEB, preimage(f, A), A) - (0.0 if g.is_identity() else
                                                     j_transfer(LEB, preimage(g, A), A))
        assert abs(got - a[e]) <= 1e-8, f"{e}: moved {got}, charge {a[e]}"


@pytest.mark.parametrize("s", [0.5, 2.0])
def test_realize_line_matches_translation(s):
    a = EndCharge(LINE, {"e+": s, "e-": -s})
    h, path, rep = realize_end_charge(LEB, a, 2, path_samples=2)
    c = end_charge_of(h, LEB)
    ref = end_charge_of(P.translation(LINE, s), LEB)
    for e in LINE.end_ids:
        assert abs(c[e] - ref[e]) <= 1e-6, f"{e}: {c[e]} vs translation {ref[e]}"
    assert rep["preservation_residual"] <= rep["preservation_budget"]
    assert path.maps[0].is_identity() and path.maps[-1] is h


def test_realize_cylinder_and_zero():
    om = P.density(CYL, np.ones(CYL.node_shape))
    a = EndCharge(CYL, {"e+": 3.0, "e-": -3.0})
    h, _, rep = realize_end_charge(om, a, 2, path_samples=2)
    assert rep["charge_error"] <= 1e-6 and rep["preservation_residual"] <= rep["preservation_budget"]
    h0, _, _ = realize_end_charge(om, EndCharge.zero(CYL), 2)
    assert h0.is_identity()
    with pytest.raises(PreconditionError, match="sum"):
        realize_end_charge(om, EndCharge(CYL, {"e+": 1.0}), 2)


def test_match_volume_forms_moves_bump():
    mu = P.density(LINE, 1 + 0.4 * P.bump_at(LINE, [-1.5], 0.5))
    nu = P.density(LINE, 1 + 0.4 * P.bump_at(LINE, [1.5], 0.5))
    h, rep = match_volume_forms(mu, nu, 2)
    err = np.abs(pushforward(h, mu).samples - nu.samples).max()
    assert err <= 50 * LINE.h ** 2 and rep["residual"] == pytest.approx(err)
    same, _ = match_volume_forms(mu, mu, 2)
    assert same.is_identity()


def test_match_volume_forms_rejects_mismatched_ends():
    nu = DensityField(LINE, np.ones(LINE.node_shape),
                      {"e-": TailModel.constant(1.0), "e+": TailModel.decaying(2.0, 0.5)})
    with pytest.raises(EndSetMismatch, match="e\\+"):
        match_volume_forms(LEB, nu, 2)


def test_engulf_family_rejects_bad_regions():
    with pytest.raises(PreconditionError):
        engulf_family(LINE, Region.empty(LINE))
    with pytest.raises(PreconditionError):
        engulf_family(LINE, slab(LINE, -math.inf, -2) | slab(LINE, 2, math.inf))
