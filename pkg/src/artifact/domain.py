"""Model manifolds, their grids, cell regions, end sets and exhaustions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .errors import DomainMismatch, PreconditionError

KINDS = {
    # kind: (periodic flags, end list as (id, axis, sign))
    "interval": ((False,), ()),
    "circle": ((True,), ()),
    "rectangle": ((False, False), ()),
    "torus": ((True, True), ()),
    "line": ((False,), (("e-", 0, -1), ("e+", 0, 1))),
    "half_line": ((False,), (("e+", 0, 1),)),
    "cylinder": ((True, False), (("e-", 1, -1), ("e+", 1, 1))),
}

MIN_NODES = 16
# scale of the arctan compactification and radius factor of the collapsing circle
METRIC_SCALE = 0.25
METRIC_CIRCLE = 0.125


@dataclass(frozen=True)
class EndDescriptor:
    id: str
    axis: int
    sign: int
    collar_start: float


@dataclass(frozen=True, eq=False)
class Domain:
    kind: str
    bounds: tuple
    periodic: tuple
    nodes: tuple
    truncation: float | None
    collar_start: float | None
    ends: tuple = field(default=())

    @property
    def dim(self) -> int:
        return len(self.nodes)

    @property
    def axial(self) -> int:
        """Axis along which ends, exhaustion slabs and fibers run."""
        return self.dim - 1

    @property
    def noncompact(self) -> bool:
        return len(self.ends) > 0

    @property
    def node_shape(self) -> tuple:
        return tuple(self.nodes)

    @property
    def cell_shape(self) -> tuple:
        return tuple(n if p else n - 1 for n, p in zip(self.nodes, self.periodic))

    def spacing(self, axis: int) -> float:
        lo, hi = self.bounds[axis]
        n = self.nodes[axis]
        return (hi - lo) / n if self.periodic[axis] else (hi - lo) / (n - 1)

    @cached_property
    def h(self) -> float:
        """Largest grid spacing, used for tolerance budgets."""
        return max(self.spacing(a) for a in range(self.dim))

    def coords(self, axis: int) -> np.ndarray:
        lo, hi = self.bounds[axis]
        n = self.nodes[axis]
        if self.periodic[axis]:
            return lo + self.spacing(axis) * np.arange(n)
        return np.linspace(lo, hi, n)

    def cell_centers(self, axis: int) -> np.ndarray:
        x = self.coords(axis)
        return x + 0.5 * self.spacing(axis) if self.periodic[axis] else 0.5 * (x[:-1] + x[1:])

    def period(self, axis: int) -> float:
        lo, hi = self.bounds[axis]
        return hi - lo

    @property
    def cell_volume(self) -> float:
        return float(np.prod([self.spacing(a) for a in range(self.dim)]))

    @property
    def cross_measure(self) -> float:
        """Measure of a cross-section transverse to the axial direction."""
        return 1.0 if self.dim == 1 else self.period(0)

    def node_grid(self) -> tuple:
        return tuple(np.meshgrid(*[self.coords(a) for a in range(self.dim)], indexing="ij"))

    def column_weights(self) -> np.ndarray:
        """Quadrature weights of the transverse node columns (trapezoid or periodic)."""
        if self.dim == 1:
            return np.ones(1)
        h0 = self.spacing(0)
        w = np.full(self.nodes[0], h0)
        if not self.periodic[0]:
            w[0] = w[-1] = 0.5 * h0
        return w

    def end(self, end_id: str) -> EndDescriptor:
        for e in self.ends:
            if e.id == end_id:
                return e
        raise PreconditionError(f"unknown end id {end_id!r} for kind {self.kind}")

    @property
    def end_ids(self) -> tuple:
        return tuple(e.id for e in self.ends)

    def edge_index(self, end: EndDescriptor) -> int:
        """Index of the outermost cell layer toward an end."""
        return -1 if end.sign > 0 else 0

    def snap(self, value: float, axis: int | None = None) -> float:
        axis = self.axial if axis is None else axis
        x = self.coords(axis)
        return float(x[np.argmin(np.abs(x - value))])

    def to_spec(self) -> dict:
        spec = {
            "kind": self.kind,
            "bounds": [list(map(float, b)) for b in self.bounds],
            "nodes": list(map(int, self.nodes)),
        }
        if self.truncation is not None:
            spec["truncation"] = float(self.truncation)
            spec["collar_start"] = float(self.collar_start)
        return spec

    def same_as(self, other: "Domain") -> bool:
        return self is other or self.to_spec() == other.to_spec()

    def require_same(self, other: "Domain") -> None:
        if not self.same_as(other):
            raise DomainMismatch(f"domain mismatch: {self.to_spec()} vs {other.to_spec()}")


def build_domain(spec: dict | None = None, **kwargs) -> Domain:
    """Build a Domain from a JSON-style spec (kind, bounds, nodes, truncation, collar_start)."""
    spec = dict(spec or {}, **kwargs)
    kind = spec.get("kind")
    if kind not in KINDS:
        raise PreconditionError(f"unknown kind {kind!r}; expected one of {sorted(KINDS)}")
    periodic, end_list = KINDS[kind]
    dim = len(periodic)

    nodes = spec.get("nodes")
    if nodes is None:
        raise PreconditionError("field 'nodes' is required")
    if isinstance(nodes, (int, np.integer)):
        nodes = [int(nodes)] * dim
    nodes = tuple(int(n) for n in nodes)
    if len(nodes) != dim:
        raise PreconditionError(f"kind {kind} needs {dim} node counts, got {len(nodes)}")
    if min(nodes) < MIN_NODES:
        raise PreconditionError(f"node counts must be >= {MIN_NODES}, got {nodes}")

    T = spec.get("truncation")
    bounds = spec.get("bounds")
    if end_list:
        if T is None and bounds is not None:
            T = float(bounds[-1][1])
        if T is None:
            raise PreconditionError(f"kind {kind} requires a truncation T")
        T = float(T)
        if not T > 0:
            raise PreconditionError(f"truncation must be positive, got {T}")
        axial_window = (0.0, T) if kind == "half_line" else (-T, T)
        default = [[0.0, 2 * math.pi]] if kind == "cylinder" else []
        default.append(list(axial_window))
        if bounds is None:
            bounds = default
        if not np.allclose(bounds[-1], axial_window, rtol=0, atol=1e-12):
            raise PreconditionError(
                f"axial bounds {bounds[-1]} disagree with truncation window {axial_window}")
    else:
        T = None
        if bounds is None:
            bounds = [[0.0, 1.0]] * dim
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    if len(bounds) != dim:
        raise PreconditionError(f"kind {kind} needs {dim} bounds, got {len(bounds)}")
    for a, (lo, hi) in enumerate(bounds):
        if not hi > lo:
            raise PreconditionError(f"nonpositive spacing on axis {a}: bounds {lo}..{hi}")

    c = None
    ends = ()
    if end_list:
        c = spec.get("collar_start")
        c = 0.75 * T if c is None else float(c)
        if not c < T:
            raise PreconditionError(f"collar_start {c} must be below truncation {T}")
        if c < 0 or (kind == "half_line" and c <= 0):
            raise PreconditionError(f"collar_start {c} must be positive")
        probe = Domain(kind, bounds, periodic, nodes, T, c)
        c = probe.snap(c)
        if not c < T:
            raise PreconditionError(f"collar_start snaps to the window edge {T}; refine the grid")
        ends = tuple(EndDescriptor(i, a, s, c) for i, a, s in end_list)
        for e in ends:
            if periodic[e.axis]:
                raise PreconditionError(f"end {e.id} runs along a periodic axis")
    return Domain(kind, bounds, periodic, nodes, T, c, ends)


@dataclass(frozen=True, eq=False)
class Region:
    """Union of grid cells plus per-end tail flags (the region contains the tail beyond T)."""

    domain: Domain
    mask: np.ndarray
    tails: frozenset = frozenset()

    def __post_init__(self):
        d = self.domain
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != d.cell_shape:
            raise PreconditionError(f"mask shape {mask.shape} != cell shape {d.cell_shape}")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        tails = frozenset(self.tails)
        unknown = tails - set(d.end_ids)
        if unknown:
            raise PreconditionError(f"unknown tail flags {sorted(unknown)}")
        object.__setattr__(self, "tails", tails)
        for e in d.ends:
            layer = np.take(mask, d.edge_index(e), axis=e.axis)
            if e.id in tails and not layer.all():
                raise PreconditionError(f"tail flag {e.id} set but the edge layer is not filled")
            if e.id not in tails and layer.any():
                raise PreconditionError(
                    f"edge layer toward {e.id} is occupied but the tail flag is not set")

    @classmethod
    def from_mask(cls, d: Domain, mask) -> "Region":
        """Infer tail flags from fully occupied edge layers."""
        mask = np.asarray(mask, dtype=bool)
        tails = set()
        for e in d.ends:
            layer = np.take(mask, d.edge_index(e), axis=e.axis)
            if layer.all():
                tails.add(e.id)
            elif layer.any():
                raise PreconditionError(f"edge layer toward {e.id} is partially occupied")
        return cls(d, mask, frozenset(tails))

    @classmethod
    def empty(cls, d: Domain) -> "Region":
        return cls(d, np.zeros(d.cell_shape, bool))

    @classmethod
    def full(cls, d: Domain) -> "Region":
        return cls(d, np.ones(d.cell_shape, bool), frozenset(d.end_ids))

    def is_empty(self) -> bool:
        return not self.mask.any() and not self.tails

    def equals(self, other: "Region") -> bool:
        return (self.domain.same_as(other.domain) and self.tails == other.tails
                and np.array_equal(self.mask, other.mask))

    def complement(self) -> "Region":
        return Region(self.domain, ~self.mask, frozenset(self.domain.end_ids) - self.tails)

    def _combine(self, other: "Region", op: str) -> "Region":
        self.domain.require_same(other.domain)
        a, b = self.mask, other.mask
        ta, tb = self.tails, other.tails
        if op == "union":
            return Region(self.domain, a | b, ta | tb)
        if op == "intersect":
            return Region(self.domain, a & b, ta & tb)
        if op == "diff":
            return Region(self.domain, a & ~b, ta - tb)
        if op == "symdiff":
            return Region(self.domain, a ^ b, ta ^ tb)
        raise PreconditionError(f"unknown region operation {op!r}")

    def __or__(self, other):
        return self._combine(other, "union")

    def __and__(self, other):
        return self._combine(other, "intersect")

    def __sub__(self, other):
        return self._combine(other, "diff")

    def __xor__(self, other):
        return self._combine(other, "symdiff")

    def is_slab(self) -> bool:
        """True when the mask does not vary across the transverse axis."""
        if self.domain.dim == 1:
            return True
        return bool((self.mask == self.mask[:1]).all())

    def axial_profile(self) -> np.ndarray:
        if not self.is_slab():
            raise PreconditionError("region is not an axial slab")
        return self.mask if self.domain.dim == 1 else self.mask[0]

    def axial_intervals(self) -> list:
        """Axial intervals (lo, hi) covered by a slab region; tails extend to +-inf."""
        d = self.domain
        prof = self.axial_profile()
        x = d.coords(d.axial)
        periodic = d.periodic[d.axial]
        out = []
        n = prof.size
        i = 0
        while i < n:
            if not prof[i]:
                i += 1
                continue
            j = i
            while j + 1 < n and prof[j + 1]:
                j += 1
            lo = x[i]
            hi = x[j + 1] if j + 1 < x.size else (x[0] + d.period(d.axial) if periodic else x[-1])
            out.append([lo, hi])
            i = j + 1
        for e in d.ends:
            if e.id in self.tails:
                if e.sign > 0:
                    out[-1][1] = math.inf
                else:
                    out[0][0] = -math.inf
        return [tuple(iv) for iv in out]

    def touches_boundary(self) -> bool:
        return bool(self.tails)


def region_algebra(A: Region, B: Region, op: str) -> Region:
    return A._combine(B, op)


def end_set_of(C: Region) -> frozenset:
    return frozenset(C.tails)


def slab(d: Domain, lo: float, hi: float) -> Region:
    """Cells whose axial centers lie in [lo, hi]; infinite limits set the tail flags."""
    centers = d.cell_centers(d.axial)
    prof = (centers >= lo) & (centers <= hi)
    mask = np.broadcast_to(prof, d.cell_shape).copy()
    return Region.from_mask(d, mask)


def representative_region(d: Domain, F) -> Region:
    R = Region.empty(d)
    for end_id in sorted(F):
        e = d.end(end_id)
        if e.sign > 0:
            R = R | slab(d, e.collar_start, math.inf)
        else:
            R = R | slab(d, -math.inf, -e.collar_start)
    return R


def components(R: Region) -> list:
    """Connected components (face adjacency, periodic wrap) in a fixed lexicographic order."""
    d = R.domain
    if not R.mask.any():
        return []
    labels, count = ndimage.label(R.mask)
    parent = list(range(count + 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a in range(d.dim):
        if d.periodic[a]:
            first = np.take(labels, 0, axis=a)
            last = np.take(labels, -1, axis=a)
            for u, v in zip(first.ravel(), last.ravel()):
                if u and v:
                    ru, rv = find(u), find(v)
                    if ru != rv:
                        parent[max(ru, rv)] = min(ru, rv)
    roots = np.array([find(i) for i in range(count + 1)])
    merged = roots[labels]
    out = []
    seen = []
    for flat in np.flatnonzero(merged.ravel()):
        lab = merged.ravel()[flat]
        if lab not in seen:
            seen.append(lab)
    for lab in seen:
        mask = merged == lab
        out.append(Region.from_mask(d, mask))
    return out


def interior_contains(outer: Region, inner: Region) -> bool:
    """True when inner, thickened by one cell, still lies inside outer."""
    d = outer.domain
    grown = inner.mask.copy()
    for a in range(d.dim):
        for shift in (-1, 1):
            if d.periodic[a]:
                grown |= np.roll(inner.mask, shift, axis=a)
            else:
                rolled = np.roll(inner.mask, shift, axis=a)
                edge = [slice(None)] * d.dim
                edge[a] = 0 if shift > 0 else -1
                rolled[tuple(edge)] = False
                grown |= rolled
    return bool((~grown | outer.mask).all()) and inner.tails <= outer.tails


def _embed(d: Domain, pts: np.ndarray) -> np.ndarray:
    """Embed points of the domain into the end compactification (arctan chart)."""
    u = pts[-1]
    phi = np.arctan(u / METRIC_SCALE)
    if d.dim == 1:
        return phi[None, :]
    zeta = 0.5 * math.pi - np.abs(phi)
    ang = 2 * math.pi * (pts[0] - d.bounds[0][0]) / d.period(0)
    r = METRIC_CIRCLE * zeta
    return np.stack([phi, r * np.cos(ang), r * np.sin(ang)])


def compactified_diameter(R: Region) -> float:
    """Diameter of the closure of R in the end compactification metric."""
    d = R.domain
    if R.is_empty():
        return 0.0
    if d.dim == 1:
        x = d.coords(0)
        idx = np.flatnonzero(R.mask)
        pts = np.concatenate([x[idx], x[idx + 1]])
        phi = np.arctan(pts / METRIC_SCALE)
        lo, hi = phi.min(), phi.max()
        for e in d.ends:
            if e.id in R.tails:
                lo, hi = (lo, 0.5 * math.pi) if e.sign > 0 else (-0.5 * math.pi, hi)
        return float(hi - lo)
    x0, x1 = d.coords(0), d.coords(1)
    step = max(1, x0.size // 32)
    cols = np.arange(0, x0.size, step)
    idx = np.argwhere(R.mask)
    rows = np.unique(idx[:, 1])
    pts_u = np.concatenate([x1[rows], x1[rows + 1]])
    th, uu = np.meshgrid(x0[cols], np.unique(pts_u), indexing="ij")
    emb = _embed(d, np.stack([th.ravel(), uu.ravel()]))
    extra = []
    for e in d.ends:
        if e.id in R.tails:
            extra.append([0.5 * math.pi * e.sign, 0.0, 0.0])
    P = emb.T
    if extra:
        P = np.vstack([P, np.array(extra)])
    try:
        hull = ConvexHull(P)
        P = P[hull.vertices]
    except QhullError:
        pass
    diff = P[:, None, :] - P[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


def _tail_diameter(d: Domain, r: float) -> float:
    return compactified_diameter(slab(d, r, math.inf))


@dataclass(frozen=True, eq=False)
class Exhaustion:
    domain: Domain
    K: tuple
    L: tuple
    radii: tuple

    @property
    def depth(self) -> int:
        return len(self.K)

    def level(self, k: int) -> tuple:
        """(K_k, L_k) for k >= 1; L_0 is the empty region."""
        return self.K[k - 1], self.L[k - 1]

    def L_prev(self, k: int) -> Region:
        return Region.empty(self.domain) if k == 1 else self.L[k - 2]

    def K_complement_components(self, k: int) -> list:
        return components(self.K[k - 1].complement())

    def L_complement_components(self, k: int) -> list:
        return components(self.L[k - 1].complement())

    def inner_shell_components(self, k: int) -> list:
        """Components of cl(K_k - L_{k-1})."""
        return components(self.K[k - 1] - self.L_prev(k))

    def outer_shell_components(self, k: int) -> list:
        """Components of cl(L_k - K_k)."""
        return components(self.L[k - 1] - self.K[k - 1])

    def blocks(self) -> list:
        """Components of cl(L_i - L_{i-1}) over all levels, innermost first."""
        out = []
        for k in range(1, self.depth + 1):
            out.extend(components(self.L[k - 1] - self.L_prev(k)))
        return out

    def check(self) -> dict:
        """Evaluate every exhaustion invariant; returns name -> bool."""
        res = {}
        for k in range(1, self.depth + 1):
            K, L = self.level(k)
            Lp = self.L_prev(k)
            res[f"K{k} in int L{k}"] = interior_contains(L, K)
            res[f"L{k - 1} in int K{k}"] = interior_contains(K, Lp) if k > 1 else True
            for name, R in (("K", K), ("L", L)):
                comps = components(R.complement())
                res[f"{name}{k}^c components noncompact"] = all(c.tails for c in comps)
                res[f"{name}{k}^c diameters"] = all(
                    compactified_diameter(c) <= 2.0 ** -k + 1e-12 for c in comps)
            res[f"K{k}, L{k} connected"] = len(components(L)) == 1 and len(components(K)) == 1
            res[f"L{k} meets K{k}^c components connectedly"] = all(
                len(components(L & A)) == 1 for A in components(K.complement()))
            if k > 1:
                res[f"K{k} meets L{k - 1}^c components connectedly"] = all(
                    len(components(K & A)) == 1 for A in components(Lp.complement()))
        return res


def standard_exhaustion(d: Domain, depth: int, radii=None) -> Exhaustion:
    """Nested axial slabs K_k = [-r, r] (half_line: [0, r]) with interleaved radii."""
    if not d.noncompact:
        raise PreconditionError(f"kind {d.kind} is compact; exhaustions need ends")
    if depth < 1:
        raise PreconditionError(f"depth must be >= 1, got {depth}")
    T = d.truncation
    h = d.spacing(d.axial)
    if radii is None:
        step = T / (2 * depth + 2)
        radii = []
        prev = 0.0
        for k in range(1, depth + 1):
            lo = max(prev + step, _min_radius(d, 2.0 ** -k))
            radii.append(lo)
            radii.append(lo + step)
            prev = lo + step
    radii = [d.snap(float(r)) for r in radii]
    if len(radii) != 2 * depth:
        raise PreconditionError(f"need {2 * depth} radii, got {len(radii)}")
    if radii[0] <= 0 or any(b - a < 2 * h - 1e-12 for a, b in zip(radii, radii[1:])):
        raise PreconditionError(f"radii {radii} are not strictly interleaved on this grid")
    if radii[-1] > T - 2 * h + 1e-12:
        raise PreconditionError(
            f"depth {depth} does not fit: outermost radius {radii[-1]} vs truncation {T}")
    lo_of = (lambda r: -h) if d.kind == "half_line" else (lambda r: -r)
    Ks, Ls = [], []
    for k in range(depth):
        rK, rL = radii[2 * k], radii[2 * k + 1]
        Ks.append(slab(d, lo_of(rK), rK))
        Ls.append(slab(d, lo_of(rL), rL))
    return Exhaustion(d, tuple(Ks), tuple(Ls), tuple(radii))


def _min_radius(d: Domain, target: float) -> float:
    """Smallest slab radius whose outer tail has compactified diameter <= target."""
    lo, hi = 0.0, d.truncation
    if _tail_diameter(d, d.snap(hi) - d.spacing(d.axial)) > target:
        return hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _tail_diameter(d, mid) <= target * 0.98:
            hi = mid
        else:
            lo = mid
    return hi + d.spacing(d.axial)


def all_end_subsets(d: Domain):
    ids = d.end_ids
    for r in range(len(ids) + 1):
        for combo in combinations(ids, r):
            yield frozenset(combo)
