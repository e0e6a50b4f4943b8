import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.domain import (Region, all_end_subsets, build_domain, components, end_set_of,
                             region_algebra, representative_region, slab, standard_exhaustion)
from artifact.errors import PreconditionError


def line(n=512):
    return build_domain(kind="line", truncation=10, nodes=n)


def test_kinds_determine_end_sets():
    assert line().end_ids == ("e-", "e+"), f"line ends {line().end_ids}"
    torus = build_domain(kind="torus", nodes=64)
    assert torus.end_ids == () and torus.node_shape == (64, 64), f"torus {torus}"
    cyl = build_domain(kind="cylinder", truncation=5, nodes=[32, 128])
    assert len(cyl.ends) == 2 and all(e.axis == 1 for e in cyl.ends), f"cylinder ends {cyl.ends}"
    half = build_domain(kind="half_line", truncation=10, nodes=256)
    assert half.end_ids == ("e+",), f"half_line ends {half.end_ids}"


@pytest.mark.parametrize("spec", [
    {"kind": "klein", "nodes": 32},
    {"kind": "line", "nodes": 32},
    {"kind": "line", "nodes": 4, "truncation": 1},
    {"kind": "line", "nodes": 64, "truncation": -1},
    {"kind": "rectangle", "nodes": [32]},
    {"kind": "line", "nodes": 64, "truncation": 5, "collar_start": 6},
])
def test_build_domain_rejects(spec):
    with pytest.raises(PreconditionError):
        build_domain(spec)


def test_spec_round_trip():
    d = build_domain(kind="cylinder", truncation=5, nodes=[32, 128])
    again = build_domain(d.to_spec())
    assert again.same_as(d), f"{again.to_spec()} vs {d.to_spec()}"


def test_region_set_algebra_examples():
    d = line()
    A = slab(d, 0, math.inf)
    assert region_algebra(A, A, "symdiff").is_empty(), "A symdiff A should be empty"
    diff = A - slab(d, 1, math.inf)
    assert not diff.tails, f"tails {diff.tails}"
    lo, hi = diff.axial_intervals()[0]
    assert abs(lo) < d.h and abs(hi - 1) < d.h, f"[0,1) expected, got {(lo, hi)}"
    both = A | slab(d, -math.inf, 0)
    assert both.tails == {"e-", "e+"}, f"tails {both.tails}"


def test_tail_flags_follow_edge_layer():
    d = line(64)
    mask = np.zeros(d.cell_shape, bool)
    mask[-1] = True
    with pytest.raises(PreconditionError):
        Region(d, mask)
    assert Region.from_mask(d, mask).tails == {"e+"}


def test_end_sets():
    d = line()
    assert end_set_of(slab(d, 0, math.inf)) == {"e+"}
    assert end_set_of(slab(d, -1, 1)) == frozenset()
    assert end_set_of(slab(d, -1, 1).complement()) == {"e-", "e+"}


def test_representative_regions_cover_every_end_subset():
    for d in (line(), build_domain(kind="half_line", truncation=10, nodes=256),
              build_domain(kind="cylinder", truncation=5, nodes=[32, 128])):
        for F in all_end_subsets(d):
            R = representative_region(d, F)
            assert end_set_of(R) == F, f"{d.kind}: {F} -> {end_set_of(R)}"
    d = line()
    assert representative_region(d, set()).is_empty()
    lo, hi = representative_region(d, {"e+"}).axial_intervals()[0]
    assert lo == pytest.approx(d.collar_start, abs=d.h) and hi == math.inf, f"{(lo, hi)}"
    cyl = build_domain(kind="cylinder", truncation=5, nodes=[32, 128])
    both = representative_region(cyl, {"e-", "e+"})
    c = cyl.collar_start
    assert both.complement().equals(slab(cyl, -c + 1e-9, c - 1e-9)), "central slab complement"


def test_exhaustion_examples():
    d = line()
    ex = standard_exhaustion(d, 2, radii=[1, 2, 3, 4])
    want = [(1, 2), (3, 4)]
    for k, (rk, rl) in enumerate(want, start=1):
        K, L = ex.level(k)
        (klo, khi), = K.axial_intervals()
        (llo, lhi), = L.axial_intervals()
        assert abs(khi - rk) < d.h and abs(klo + rk) < d.h, f"K{k} = {(klo, khi)}"
        assert abs(lhi - rl) < d.h and abs(llo + rl) < d.h, f"L{k} = {(llo, lhi)}"
    half = build_domain(kind="half_line", truncation=10, nodes=512)
    ex = standard_exhaustion(half, 1, radii=[1, 2])
    K, L = ex.level(1)
    assert K.axial_intervals()[0][0] == pytest.approx(0.0, abs=half.h), f"{K.axial_intervals()}"
    assert len(ex.K_complement_components(1)) == 1 and len(ex.L_complement_components(1)) == 1
    cyl = build_domain(kind="cylinder", truncation=5, nodes=[32, 128])
    ex = standard_exhaustion(cyl, 1)
    assert len(ex.K_complement_components(1)) == 2, "cylinder K1^c has two components"


@pytest.mark.parametrize("kind,depth", [("line", 1), ("line", 2), ("line", 3),
                                        ("half_line", 2), ("cylinder", 2)])
def test_standard_exhaustion_invariants(kind, depth):
    d = build_domain(kind=kind, truncation=10 if kind != "cylinder" else 5,
                     nodes=[32, 256] if kind == "cylinder" else 1025)
    checks = standard_exhaustion(d, depth).check()
    bad = [k for k, v in checks.items() if not v]
    assert not bad, f"failed invariants {bad}"


def test_exhaustion_rejects_compact_and_too_deep():
    with pytest.raises(PreconditionError):
        standard_exhaustion(build_domain(kind="interval", nodes=64), 1)
    with pytest.raises(PreconditionError):
        standard_exhaustion(line(64), 40)


def test_components_are_ordered_and_periodic():
    d = line(256)
    R = slab(d, -math.inf, -3) | slab(d, 3, math.inf)
    comps = components(R)
    assert [c.tails for c in comps] == [{"e-"}, {"e+"}], f"{[c.tails for c in comps]}"
    torus = build_domain(kind="torus", nodes=32)
    mask = np.zeros(torus.cell_shape, bool)
    mask[0, :] = mask[-1, :] = True
    assert len(components(Region(torus, mask))) == 1, "periodic wrap joins the two rows"


def _masks(d):
    return st.lists(st.booleans(), min_size=d.cell_shape[0], max_size=d.cell_shape[0]).map(
        lambda bits: Region.from_mask(d, np.array(bits)))


SMALL_LINE = build_domain(kind="line", truncation=4, nodes=17)


@settings(max_examples=60, deadline=None)
@given(_masks(SMALL_LINE), _masks(SMALL_LINE), _masks(SMALL_LINE))
def test_region_boolean_algebra(A, B, C):
    x = region_algebra
    assert x(x(A, B, "symdiff"), C, "symdiff").equals(x(A, x(B, C, "symdiff"), "symdiff"))
    assert x(A, B, "symdiff").equals(x(B, A, "symdiff"))
    assert (A - B).equals(A & B.complement()), "diff = intersect complement"
    assert A.complement().complement().equals(A)
    assert A.complement().tails == set(SMALL_LINE.end_ids) - A.tails
