"""Pure-numpy implementations of the hot kernels.

Mirrors mvlidar._kernels._core (the Cython extension) function for
function. Reductions accumulate in float64 and results are cast to
float32, matching the compiled core's arithmetic. Everything here is
single-threaded and deterministic: einsum runs unoptimized (no BLAS
dispatch), and scatter reductions use bincount/lexsort with fixed
ordering.
"""

from __future__ import annotations

import numpy as np

name = "numpy"


def conv2d(x, w, bias, stride):
    """Direct 2-D convolution, same padding (pad = k // 2).

    x: (C, H, W) float32, w: (F, C, k, k) float32, bias: (F,) or None.
    Output spatial dims are ceil(H / stride) x ceil(W / stride).
    """
    cin, h, wid = x.shape
    f, _, k, _ = w.shape
    pad = k // 2
    oh = -(-h // stride)
    ow = -(-wid // stride)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(cin, oh, ow, k, k),
        strides=(sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    out = np.einsum("cijuv,fcuv->fij", windows, w,
                    dtype=np.float64, optimize=False)
    if bias is not None:
        out += bias.astype(np.float64)[:, None, None]
    return out.astype(np.float32)


def deconv2d(x, w, bias):
    """Transposed convolution, kernel 2x2, stride 2 (exact 2x upsample).

    x: (C, H, W) float32, w: (C, F, 2, 2) float32, bias: (F,) or None.
    out[f, 2i+u, 2j+v] = sum_c x[c, i, j] * w[c, f, u, v] (+ bias).
    """
    c, h, wid = x.shape
    f = w.shape[1]
    out = np.einsum("chw,cfuv->fhuwv", x, w, dtype=np.float64, optimize=False)
    if bias is not None:
        out += bias.astype(np.float64)[:, None, None, None, None]
    return out.reshape(f, 2 * h, 2 * wid).astype(np.float32)


def minrange_bin(rows, cols, ranges, n_rows, n_cols):
    """Winner index per cell: the minimum-range point, ties to lower index.

    Returns an (n_rows, n_cols) int64 map; -1 marks empty cells. Indices
    refer to positions in the input arrays.
    """
    winner = np.full(n_rows * n_cols, -1, dtype=np.int64)
    if len(rows) == 0:
        return winner.reshape(n_rows, n_cols)
    flat = rows.astype(np.uint64) * np.uint64(n_cols) + cols.astype(np.uint64)
    # positive float32 bit patterns sort like the floats, so one stable
    # sort of (cell << 32 | range_bits) orders by cell, then range, then
    # input index
    key = (flat << np.uint64(32)) | ranges.view(np.uint32).astype(np.uint64)
    order = np.argsort(key, kind="stable")
    sorted_cells = flat[order]
    first = np.flatnonzero(np.r_[True, sorted_cells[1:] != sorted_cells[:-1]])
    winner[sorted_cells[first].astype(np.int64)] = order[first]
    return winner.reshape(n_rows, n_cols)


def sort_by_cell(cells):
    """Stable ascending argsort of non-negative keys."""
    return np.argsort(cells, kind="stable")


def spherical_bins(xyz, n_rows, n_cols, fov_up, fov_down):
    """Range-image cell per point.

    xyz: (N, 3) float32. Returns (rows, cols, ranges, valid): int32 bins,
    float32 ranges, and a bool mask of points with positive range inside
    the vertical FOV (boundaries inclusive). rows/cols are only
    meaningful where valid.
    """
    pts = xyz.astype(np.float64)
    rng = np.sqrt((pts ** 2).sum(axis=1))
    valid = rng > 0.0
    elev = np.zeros(len(pts))
    np.arcsin(np.divide(pts[:, 2], rng, out=np.zeros_like(rng), where=valid),
              out=elev, where=valid)
    valid &= (elev >= fov_down) & (elev <= fov_up)

    rows = np.floor(n_rows * (fov_up - elev) / (fov_up - fov_down)).astype(np.int64)
    np.clip(rows, 0, n_rows - 1, out=rows)
    azim = np.arctan2(pts[:, 1], pts[:, 0])
    cols = np.floor(n_cols * (1.0 - (azim / np.pi + 1.0) / 2.0)).astype(np.int64)
    cols %= n_cols
    return (rows.astype(np.int32), cols.astype(np.int32),
            rng.astype(np.float32), valid)


def bev_segments(sorted_cells, z, intensity):
    """Per-segment stats over cell-sorted points.

    sorted_cells: (M,) int64 ascending; z/intensity: (M,) float32 in the
    same order. Returns (seg_cells, seg_starts, min_z, max_z, mean_i):
    the K distinct cells, their [start, end) offsets (K+1 entries), and
    float32 stats per segment (mean accumulated in float64).
    """
    m = len(sorted_cells)
    if m == 0:
        return (np.empty(0, np.int64), np.zeros(1, np.int64),
                np.empty(0, np.float32), np.empty(0, np.float32),
                np.empty(0, np.float32))
    starts = np.flatnonzero(np.r_[True, sorted_cells[1:] != sorted_cells[:-1]])
    seg_starts = np.r_[starts, m]
    seg_cells = sorted_cells[starts]
    min_z = np.minimum.reduceat(z, starts)
    max_z = np.maximum.reduceat(z, starts)
    sums = np.add.reduceat(intensity.astype(np.float64), starts)
    mean_i = (sums / np.diff(seg_starts)).astype(np.float32)
    return seg_cells, seg_starts, min_z, max_z, mean_i


def segment_mean_rows(sorted_cells, vecs):
    """Arithmetic mean of row vectors per segment of cell-sorted points.

    sorted_cells: (M,) int64 ascending; vecs: (M, K) float32 in the same
    order. Returns (seg_cells, means): distinct cells and (K',
    K) float32 means, accumulated in float64.
    """
    m, k = vecs.shape
    if m == 0:
        return np.empty(0, np.int64), np.empty((0, k), np.float32)
    starts = np.flatnonzero(np.r_[True, sorted_cells[1:] != sorted_cells[:-1]])
    counts = np.diff(np.r_[starts, m])
    sums = np.add.reduceat(vecs.astype(np.float64), starts, axis=0)
    return sorted_cells[starts], (sums / counts[:, None]).astype(np.float32)


def knn_vote(rows, cols, ranges, labels, n_rows, n_cols,
             csr_starts, csr_points, k, window, cutoff, n_classes):
    """Majority-vote label smoothing over range-image neighborhoods.

    For each point with a valid cell (row >= 0): gather the points binned
    to the window x window cells around its own (rows clamped, columns
    wrapped), drop itself, keep those within `cutoff` in absolute range
    difference, take the k nearest (ties to lower point index), and vote.
    Vote ties resolve toward the current label, then the lowest class id.
    Points with no eligible neighbour keep their label.
    """
    n = len(rows)
    out = labels.copy()
    half = window // 2
    offsets = range(-half, half + 1)
    for i in range(n):
        r = rows[i]
        if r < 0:
            continue
        c = cols[i]
        cand_parts = []
        for dr in offsets:
            rr = r + dr
            if rr < 0 or rr >= n_rows:
                continue
            base = rr * n_cols
            for dc in offsets:
                cc = (c + dc) % n_cols
                s, e = csr_starts[base + cc], csr_starts[base + cc + 1]
                if e > s:
                    cand_parts.append(csr_points[s:e])
        if not cand_parts:
            continue
        cand = np.concatenate(cand_parts)
        cand = cand[cand != i]
        if len(cand) == 0:
            continue
        d = np.abs(ranges[cand] - ranges[i])
        elig = d <= cutoff
        if not np.any(elig):
            continue
        cand = cand[elig]
        d = d[elig]
        sel = np.lexsort((cand, d))[:k]
        votes = np.bincount(labels[cand[sel]], minlength=n_classes)
        best = votes.max()
        cur = labels[i]
        if votes[cur] == best:
            out[i] = cur
        else:
            out[i] = int(np.flatnonzero(votes == best)[0])
    return out
