"""Local interpolation on uniform box grids (linear and Catmull-Rom cubic).

Grids are described per axis by (lo, h, n, periodic).  Values carry optional
leading batch dimensions; points have shape (dim, m).
"""

import numpy as np


def _axis_index(p, lo, h, n, periodic):
    s = (p - lo) / h
    i = np.floor(s).astype(np.int64)
    if periodic:
        t = s - i
        return np.mod(i, n), t
    i = np.clip(i, 0, n - 2)
    return i, s - i


def _take(values, axis_idx):
    """Gather values[..., i0, i1] for index arrays broadcast over points."""
    return values[(Ellipsis,) + tuple(axis_idx)]


def linear(values, grid, pts):
    """Multilinear interpolation; non-periodic axes extrapolate linearly."""
    pts = np.atleast_2d(pts)
    dim = len(grid)
    idx, frac = [], []
    for a, (lo, h, n, periodic) in enumerate(grid):
        i, t = _axis_index(pts[a], lo, h, n, periodic)
        j = np.mod(i + 1, n) if periodic else i + 1
        idx.append((i, j))
        frac.append(t)
    out = 0.0
    for corner in range(2 ** dim):
        w = 1.0
        sel = []
        for a in range(dim):
            bit = (corner >> a) & 1
            sel.append(idx[a][bit])
            w = w * (frac[a] if bit else 1.0 - frac[a])
        out = out + w * _take(values, sel)
    return out


def linear_gradient(values, grid, pts):
    """Partial derivatives of the multilinear interpolant, shape (dim, ..., m)."""
    pts = np.atleast_2d(pts)
    dim = len(grid)
    idx, frac = [], []
    for a, (lo, h, n, periodic) in enumerate(grid):
        i, t = _axis_index(pts[a], lo, h, n, periodic)
        j = np.mod(i + 1, n) if periodic else i + 1
        idx.append((i, j))
        frac.append(t)
    grads = []
    for b in range(dim):
        out = 0.0
        for corner in range(2 ** dim):
            w = 1.0
            sel = []
            for a in range(dim):
                bit = (corner >> a) & 1
                sel.append(idx[a][bit])
                if a == b:
                    w = w * ((1.0 if bit else -1.0) / grid[a][1])
                else:
                    w = w * (frac[a] if bit else 1.0 - frac[a])
            out = out + w * _take(values, sel)
        grads.append(out)
    return np.stack(grads)


def _cr_weights(t):
    t2, t3 = t * t, t * t * t
    return (
        0.5 * (-t3 + 2 * t2 - t),
        0.5 * (3 * t3 - 5 * t2 + 2),
        0.5 * (-3 * t3 + 4 * t2 + t),
        0.5 * (t3 - t2),
    )


def _pad_linear(values, grid):
    """Append linearly extrapolated ghost layers on every non-periodic axis."""
    nb = values.ndim - len(grid)
    for a, (_, _, _, periodic) in enumerate(grid):
        if periodic:
            continue
        ax = nb + a
        first = np.take(values, [0], axis=ax)
        second = np.take(values, [1], axis=ax)
        last = np.take(values, [-1], axis=ax)
        before = np.take(values, [-2], axis=ax)
        values = np.concatenate([2 * first - second, values, 2 * last - before], axis=ax)
    return values


def cubic(values, grid, pts, padded=None):
    """Tensor Catmull-Rom interpolation with linear ghost nodes at non-periodic edges.

    The stencil is local (4 nodes per axis), so the interpolant vanishes
    identically wherever the surrounding samples vanish.
    """
    pts = np.atleast_2d(pts)
    vals = _pad_linear(values, grid) if padded is None else padded
    dim = len(grid)
    stencil, weights = [], []
    for a, (lo, h, n, periodic) in enumerate(grid):
        i, t = _axis_index(pts[a], lo, h, n, periodic)
        if periodic:
            idx = [np.mod(i + k, n) for k in (-1, 0, 1, 2)]
        else:
            idx = [i + k + 1 for k in (-1, 0, 1, 2)]
        stencil.append(idx)
        weights.append(_cr_weights(t))
    out = 0.0
    if dim == 1:
        for k in range(4):
            out = out + weights[0][k] * _take(vals, [stencil[0][k]])
        return out
    for k0 in range(4):
        inner = 0.0
        for k1 in range(4):
            inner = inner + weights[1][k1] * _take(vals, [stencil[0][k0], stencil[1][k1]])
        out = out + weights[0][k0] * inner
    return out


def pad_for_cubic(values, grid):
    return _pad_linear(values, grid)


def gradient(values, grid):
    """Centered finite differences per axis (periodic wrap or one-sided second order)."""
    nb = values.ndim - len(grid)
    out = []
    for a, (lo, h, n, periodic) in enumerate(grid):
        ax = nb + a
        if periodic:
            out.append((np.roll(values, -1, axis=ax) - np.roll(values, 1, axis=ax)) / (2 * h))
        else:
            out.append(np.gradient(values, h, axis=ax, edge_order=2))
    return out


SPLINE_WRAP = 24


class Spline:
    """Cubic B-spline interpolant of node data (scipy.ndimage) on a uniform grid.

    Axes are padded before prefiltering: periodic axes with wrapped copies,
    non-periodic axes with point reflections about the edge node (keeps the
    edge value and slope).
    """

    def __init__(self, values, grid):
        from scipy import ndimage

        self._nd = ndimage
        values = np.asarray(values, dtype=float)
        self.grid = grid
        self.nb = values.ndim - len(grid)
        k = SPLINE_WRAP
        for a, (_, _, n, periodic) in enumerate(grid):
            ax = self.nb + a
            if periodic:
                pad = [(0, 0)] * values.ndim
                pad[ax] = (k, k)
                values = np.pad(values, pad, mode="wrap")
                continue
            m = min(k, n - 1)
            first = np.take(values, [0], axis=ax)
            last = np.take(values, [-1], axis=ax)
            before = 2 * first - np.take(values, np.arange(m, 0, -1), axis=ax)
            after = 2 * last - np.take(values, np.arange(n - 2, n - 2 - m, -1), axis=ax)
            if m < k:
                before = np.concatenate([np.repeat(np.take(before, [0], axis=ax), k - m, axis=ax), before], axis=ax)
                after = np.concatenate([after, np.repeat(np.take(after, [-1], axis=ax), k - m, axis=ax)], axis=ax)
            values = np.concatenate([before, values, after], axis=ax)
        batch = values.reshape((-1,) + values.shape[self.nb:])
        self.batch_shape = values.shape[:self.nb]
        self.coeffs = [ndimage.spline_filter(b, order=3, mode="mirror") for b in batch]

    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        idx = []
        for a, (lo, h, n, periodic) in enumerate(self.grid):
            s = (pts[a] - lo) / h
            s = np.mod(s, n) if periodic else np.clip(s, -SPLINE_WRAP + 2.0, n + SPLINE_WRAP - 3.0)
            idx.append(s + SPLINE_WRAP)
        idx = np.stack(idx)
        out = [self._nd.map_coordinates(c, idx, order=3, mode="mirror", prefilter=False)
               for c in self.coeffs]
        return np.stack(out).reshape(self.batch_shape + (pts.shape[1],))
