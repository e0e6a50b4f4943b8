import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact import profiles as P
from artifact.domain import build_domain, slab, standard_exhaustion
from artifact.errors import MassMismatch, PreconditionError
from artifact.fields import DensityField, mass, pushforward
from artifact.moser import (Box, MoserProblem, bump, cdf_transport_1d, cell_average,
                            collar_normalize, exterior_derivative, moser_flow_solve,
                            piecewise_moser, primitive, smoothstep)

INTERVAL = build_domain(kind="interval", nodes=1024)


def test_primitive_of_zero_is_zero():
    for d in (INTERVAL, build_domain(kind="torus", nodes=32)):
        beta = primitive(np.zeros(d.node_shape), Box.from_domain(d))
        assert not beta.values.any(), f"{d.kind}: primitive(0) has nonzero entries"


def test_primitive_1d_bump_difference():
    d = INTERVAL
    box = Box.from_domain(d)
    w = P.bump_at(d, [0.3], 0.1) - P.bump_at(d, [0.7], 0.1)
    beta = primitive(w, box)
    err = np.abs(exterior_derivative(beta) - cell_average(w, box)).max()
    assert err <= 10 * d.h ** 2, f"d beta - w = {err:.2e}"
    # the primitive is the running integral of w, so its finite differences give w back
    x = d.coords(0)
    diff = np.diff(beta.values[0]) / np.diff(x)
    mid = 0.5 * (w[1:] + w[:-1])
    assert np.abs(diff - mid).max() <= 10 * d.h ** 2, "finite-difference derivative check"


def test_primitive_2d_derivative_of_product():
    d = build_domain(kind="rectangle", nodes=128)
    box = Box.from_domain(d)
    X, Y = d.node_grid()
    s = 0.25
    by = bump((Y - 0.5) / s)
    # w = d/dy (bump_x bump_y), zero integral by construction
    u = (Y - 0.5) / s
    dby = np.where(np.abs(u) < 1, by * (-2 * u / (1 - u ** 2) ** 2) / s, 0.0)
    w = bump((X - 0.5) / s) * dby
    beta = primitive(w, box)
    err = np.abs(exterior_derivative(beta) - cell_average(w, box)).max()
    assert err <= 10 * d.h ** 2, f"d beta - w = {err:.2e}"


@settings(max_examples=25, deadline=None)
@given(st.floats(0.25, 0.75), st.floats(0.25, 0.75), st.floats(0.08, 0.2), st.floats(0.1, 3.0))
def test_primitive_property(c1, c2, r, amp):
    d = INTERVAL
    box = Box.from_domain(d)
    w = amp * P.balanced(P.bump_at(d, [c1], r), P.bump_at(d, [c2], r))
    err = np.abs(exterior_derivative(primitive(w, box)) - cell_average(w, box)).max()
    assert err <= 10 * d.h ** 2 * max(1.0, amp), f"d beta - w = {err:.2e}"


def test_equal_forms_give_exact_identity():
    mu = DensityField(INTERVAL, 1 + 0.3 * P.bump_at(INTERVAL, [0.5], 0.2))
    psi, path = moser_flow_solve(MoserProblem(mu, mu, 0.05))
    assert psi.is_identity() and path.maps[0].is_identity()


def test_interval_matches_cdf_transport():
    d = INTERVAL
    mu = DensityField.uniform(d)
    nu = DensityField(d, 1 + 0.4 * (P.bump_at(d, [0.35], 0.15) - P.bump_at(d, [0.65], 0.15)))
    psi, path = moser_flow_solve(MoserProblem(mu, nu, 0.05))
    ref = cdf_transport_1d(mu, nu)
    err = np.abs(psi.disp - ref.disp).max()
    assert err <= 1e-4, f"sup |moser - cdf| = {err:.2e}"
    assert path.maps[0].is_identity() and path.maps[-1] is psi
    x = d.coords(0)
    collar = (x <= 0.05) | (x >= 0.95)
    assert not psi.disp[0][collar].any(), "map must be the identity on the collar"


def test_torus_pushforward_and_region_masses():
    d = build_domain(kind="torus", nodes=128)
    mu = DensityField.uniform(d)
    nu = DensityField(d, 1 + 0.3 * P.balanced(P.bump_at(d, [0.4, 0.4], 0.2),
                                                P.bump_at(d, [0.6, 0.55], 0.2)))
    psi, _ = moser_flow_solve(MoserProblem(mu, nu, 0.05))
    pushed = pushforward(psi, mu)
    tol = 50 * d.h ** 2
    err = np.abs(pushed.samples - nu.samples).max()
    assert err <= tol, f"pushforward residual {err:.2e}"
    cm_p, cm_n = pushed.cell_masses(), nu.cell_masses()
    for lo, hi in ((0, 32), (32, 96), (40, 80), (0, 128)):
        a, b = cm_p[lo:hi].sum(), cm_n[lo:hi].sum()
        assert abs(a - b) <= tol * (hi - lo) / 128, f"strip {lo}:{hi} mass {a} vs {b}"


def test_mismatched_masses_rejected():
    d = build_domain(kind="interval", nodes=256)
    with pytest.raises(MassMismatch):
        cdf_transport_1d(DensityField.uniform(d), DensityField.uniform(d, 2.0))
    nu = DensityField(d, 1 + 0.2 * P.bump_at(d, [0.5], 0.2))
    with pytest.raises(MassMismatch):
        moser_flow_solve(MoserProblem(DensityField.uniform(d), nu, 0.05))
    with pytest.raises(PreconditionError):
        MoserProblem(DensityField.uniform(d), nu, 0.0)


def test_cdf_transport_linear_density_oracle():
    # nu = 1.5 - x has cumulative G(y) = 1.5 y - y^2 / 2, inverted in closed form
    d = INTERVAL
    x = d.coords(0)
    psi = cdf_transport_1d(DensityField.uniform(d), DensityField(d, 1.5 - x))
    y = psi.values[0]
    G = 1.5 * y - 0.5 * y ** 2
    assert np.abs(G - x).max() <= 1e-10, f"|G(psi(x)) - x| = {np.abs(G - x).max():.2e}"
    assert np.abs(y - (1.5 - np.sqrt(2.25 - 2 * x))).max() <= 1e-10


def test_collar_normalize_identity_and_depth():
    d = INTERVAL
    mu = DensityField(d, 1 + 0.2 * P.bump_at(d, [0.5], 0.3))
    strip = slab(d, 0.0, 0.4)
    psi, depth = collar_normalize(mu, mu, strip, (0, 1))
    (lo, hi), = strip.axial_intervals()
    assert psi.is_identity() and depth == pytest.approx(0.25 * (hi - lo)), f"depth {depth}"


def test_collar_normalize_matches_near_frontier():
    d = INTERVAL
    x = d.coords(0)
    mu = DensityField.uniform(d)
    nu = DensityField(d, 1 + 0.1 * (1 - smoothstep((x - 0.05) / 0.15)))
    psi, depth = collar_normalize(mu, nu, slab(d, 0.0, 0.4), (0, 1))
    err = np.abs(pushforward(psi, mu).samples - nu.samples)[x <= depth].max()
    assert depth > 0 and err <= 10 * d.h ** 2, f"residual {err:.2e} on [0, {depth:.3f}]"
    assert not psi.disp[0][x > 0.4].any(), "map leaves the strip"
    assert psi.values[0][1] < x[1], "denser target compresses fibers near the frontier"


def test_collar_normalize_fibers_are_independent():
    d = build_domain(kind="rectangle", nodes=64)
    X, Y = d.node_grid()
    mu = DensityField.uniform(d)
    # fibers next to the fixed x = 0, 1 sides stay untouched
    base = 1 + 0.1 * (1 - smoothstep((Y - 0.05) / 0.2)) * bump((X - 0.5) / 0.45)
    nu = DensityField(d, base)
    bumped = DensityField(d, base * (1 + 0.05 * P.bump_at(d, [0.25, 0.1], [0.05, 0.08])))
    strip = slab(d, 0.0, 0.5)
    a, _ = collar_normalize(mu, nu, strip, (1, 1))
    b, _ = collar_normalize(mu, bumped, strip, (1, 1))
    far = np.abs(d.coords(0) - 0.25) > 0.1
    assert np.array_equal(a.disp[:, far], b.disp[:, far]), "untouched fibers must not change"
    assert not np.array_equal(a.disp, b.disp), "perturbed fiber must change"


def _block_pair(d, ex):
    mu = P.density(d, np.ones(d.node_shape))
    s = np.ones(d.node_shape)
    for B in ex.blocks():
        for (lo, hi) in B.axial_intervals():
            mid, r = 0.5 * (lo + hi), 0.15 * (hi - lo)
            s = s + 0.3 * P.balanced(P.bump_at(d, [mid - r], 0.8 * r), P.bump_at(d, [mid + r], 0.8 * r))
    return mu, P.density(d, s)


def test_piecewise_moser_is_block_preserving():
    d = P.line()
    ex = standard_exhaustion(d, 2)
    mu, nu = _block_pair(d, ex)
    chi = piecewise_moser(mu, nu, ex)
    err = np.abs(pushforward(chi, mu).samples - nu.samples).max()
    assert err <= 50 * d.h ** 2, f"residual {err:.2e}"
    x = d.coords(0)
    for r in ex.radii[1::2]:
        for edge in (-r, r):
            i = int(np.argmin(np.abs(x - edge)))
            assert chi.disp[0, i] == 0.0, f"block frontier at {edge} moved by {chi.disp[0, i]}"
    assert piecewise_moser(mu, mu, ex).is_identity()


def test_piecewise_moser_names_bad_block():
    d = P.line()
    ex = standard_exhaustion(d, 2)
    mu, _ = _block_pair(d, ex)
    lo, hi = ex.radii[0], ex.radii[1]
    bad = np.ones(d.node_shape) + 0.5 * P.bump_at(d, [0.5 * (lo + hi)], 0.2 * (hi - lo))
    scale = 0.01 * mass(mu, slab(d, lo, hi)) / (bad - 1).sum() / d.h
    nu = P.density(d, 1 + (bad - 1) * scale)
    with pytest.raises(MassMismatch, match="block"):
        piecewise_moser(mu, nu, ex)
