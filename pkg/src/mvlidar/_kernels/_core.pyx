# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; signature-compatible with mvlidar._kernels._numpy.

All reductions accumulate in double and cast once to float32, with a fixed
per-output-element order, so results are deterministic run to run.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport M_PI, asin, atan2, floor, sqrt

cnp.import_array()

name = "compiled"


def spherical_bins(const float[:, ::1] xyz, Py_ssize_t n_rows, Py_ssize_t n_cols,
                   double fov_up, double fov_down):
    cdef Py_ssize_t n = xyz.shape[0]
    rows_arr = np.empty(n, dtype=np.int32)
    cols_arr = np.empty(n, dtype=np.int32)
    rng_arr = np.empty(n, dtype=np.float32)
    valid_arr = np.zeros(n, dtype=bool)
    cdef int[::1] rows = rows_arr
    cdef int[::1] cols = cols_arr
    cdef float[::1] rng = rng_arr
    cdef cnp.uint8_t[::1] valid = valid_arr.view(np.uint8)
    cdef double span = fov_up - fov_down
    cdef double x, y, z, r, elev
    cdef long long row, col
    cdef Py_ssize_t i
    for i in range(n):
        x = <double>xyz[i, 0]
        y = <double>xyz[i, 1]
        z = <double>xyz[i, 2]
        r = sqrt(x * x + y * y + z * z)
        rng[i] = <float>r
        if r == 0.0:
            rows[i] = 0
            cols[i] = 0
            continue
        elev = asin(z / r)
        if elev < fov_down or elev > fov_up:
            rows[i] = 0
            cols[i] = 0
            continue
        row = <long long>floor(n_rows * (fov_up - elev) / span)
        if row < 0:
            row = 0
        elif row >= n_rows:
            row = n_rows - 1
        col = <long long>floor(n_cols * (1.0 - (atan2(y, x) / M_PI + 1.0) / 2.0))
        col = col % n_cols
        if col < 0:
            col += n_cols
        rows[i] = <int>row
        cols[i] = <int>col
        valid[i] = 1
    return rows_arr, cols_arr, rng_arr, valid_arr


def conv2d(const float[:, :, ::1] x, const float[:, :, :, ::1] w, bias, int stride):
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], wid = x.shape[2]
    cdef Py_ssize_t f = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t pad = k // 2
    cdef Py_ssize_t oh = (h + stride - 1) // stride
    cdef Py_ssize_t ow = (wid + stride - 1) // stride
    out_arr = np.empty((f, oh, ow), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef const float[::1] b
    cdef bint has_bias = bias is not None
    if has_bias:
        b = bias
    cdef Py_ssize_t fi, oi, oj, c, ki, kj, ii, jj
    cdef double acc
    for fi in range(f):
        for oi in range(oh):
            for oj in range(ow):
                acc = 0.0
                for c in range(cin):
                    for ki in range(k):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(k):
                            jj = oj * stride + kj - pad
                            if 0 <= jj < wid:
                                acc += (<double>x[c, ii, jj]) * (<double>w[fi, c, ki, kj])
                if has_bias:
                    acc += <double>b[fi]
                out[fi, oi, oj] = <float>acc
    return out_arr


def deconv2d(const float[:, :, ::1] x, const float[:, :, :, ::1] w, bias):
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], wid = x.shape[2]
    cdef Py_ssize_t f = w.shape[1]
    out_arr = np.empty((f, 2 * h, 2 * wid), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef const float[::1] b
    cdef bint has_bias = bias is not None
    if has_bias:
        b = bias
    cdef Py_ssize_t fi, i, j, c, u, v
    cdef double acc
    for fi in range(f):
        for i in range(h):
            for j in range(wid):
                for u in range(2):
                    for v in range(2):
                        acc = 0.0
                        for c in range(cin):
                            acc += (<double>x[c, i, j]) * (<double>w[c, fi, u, v])
                        if has_bias:
                            acc += <double>b[fi]
                        out[fi, 2 * i + u, 2 * j + v] = <float>acc
    return out_arr


def minrange_bin(const int [::1] rows, const int[::1] cols, const float[::1] ranges,
                 Py_ssize_t n_rows, Py_ssize_t n_cols):
    out_arr = np.full((n_rows, n_cols), -1, dtype=np.int64)
    cdef long long[:, ::1] win = out_arr
    cdef Py_ssize_t i, n = rows.shape[0]
    cdef long long cur
    for i in range(n):
        cur = win[rows[i], cols[i]]
        if cur < 0 or ranges[i] < ranges[cur]:
            win[rows[i], cols[i]] = i
    return out_arr


def bev_segments(const long long[::1] sorted_cells, const float[::1] z, const float[::1] intensity):
    cdef Py_ssize_t m = sorted_cells.shape[0]
    if m == 0:
        return (np.empty(0, np.int64), np.zeros(1, np.int64),
                np.empty(0, np.float32), np.empty(0, np.float32),
                np.empty(0, np.float32))
    seg_cells_arr = np.empty(m, dtype=np.int64)
    seg_starts_arr = np.empty(m + 1, dtype=np.int64)
    min_arr = np.empty(m, dtype=np.float32)
    max_arr = np.empty(m, dtype=np.float32)
    mean_arr = np.empty(m, dtype=np.float32)
    cdef long long[::1] seg_cells = seg_cells_arr
    cdef long long[::1] seg_starts = seg_starts_arr
    cdef float[::1] mn = min_arr
    cdef float[::1] mx = max_arr
    cdef float[::1] mi = mean_arr
    cdef Py_ssize_t i, k = 0
    cdef long long cur = sorted_cells[0]
    cdef float vmin = z[0], vmax = z[0]
    cdef double acc = <double>intensity[0]
    cdef Py_ssize_t seg_len = 1
    seg_cells[0] = cur
    seg_starts[0] = 0
    for i in range(1, m):
        if sorted_cells[i] != cur:
            mn[k] = vmin
            mx[k] = vmax
            mi[k] = <float>(acc / <double>seg_len)
            k += 1
            cur = sorted_cells[i]
            seg_cells[k] = cur
            seg_starts[k] = i
            vmin = z[i]
            vmax = z[i]
            acc = <double>intensity[i]
            seg_len = 1
        else:
            if z[i] < vmin:
                vmin = z[i]
            if z[i] > vmax:
                vmax = z[i]
            acc += <double>intensity[i]
            seg_len += 1
    mn[k] = vmin
    mx[k] = vmax
    mi[k] = <float>(acc / <double>seg_len)
    k += 1
    seg_starts[k] = m
    return (seg_cells_arr[:k].copy(), seg_starts_arr[:k + 1].copy(),
            min_arr[:k].copy(), max_arr[:k].copy(), mean_arr[:k].copy())


def sort_by_cell(const long long[::1] cells):
    """Stable ascending argsort of non-negative keys (LSD radix, 11-bit digits)."""
    cdef Py_ssize_t m = cells.shape[0]
    out_arr = np.empty(m, dtype=np.int64)
    if m == 0:
        return out_arr
    cdef long long[::1] out = out_arr
    tmp_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] tmp = tmp_arr
    count_arr = np.zeros(2048, dtype=np.int64)
    cdef long long[::1] count = count_arr
    cdef Py_ssize_t i, d, shift = 0
    cdef long long key, total, c, maxval = 0
    for i in range(m):
        out[i] = i
        if cells[i] > maxval:
            maxval = cells[i]
    while True:
        for i in range(2048):
            count[i] = 0
        for i in range(m):
            count[(cells[out[i]] >> shift) & 2047] += 1
        total = 0
        for i in range(2048):
            c = count[i]
            count[i] = total
            total += c
        for i in range(m):
            key = (cells[out[i]] >> shift) & 2047
            tmp[count[key]] = out[i]
            count[key] += 1
        out_arr, tmp_arr = tmp_arr, out_arr
        out = out_arr
        tmp = tmp_arr
        shift += 11
        if (maxval >> shift) == 0:
            break
    return out_arr


def segment_mean_rows(const long long[::1] sorted_cells, const float[:, ::1] vecs):
    cdef Py_ssize_t m = sorted_cells.shape[0]
    cdef Py_ssize_t k = vecs.shape[1]
    if m == 0:
        return np.empty(0, np.int64), np.empty((0, k), np.float32)
    seg_cells_arr = np.empty(m, dtype=np.int64)
    out_arr = np.empty((m, k), dtype=np.float32)
    acc_arr = np.zeros(k, dtype=np.float64)
    cdef long long[::1] seg_cells = seg_cells_arr
    cdef float[:, ::1] out = out_arr
    cdef double[::1] acc = acc_arr
    cdef Py_ssize_t i, j, seg = 0, seg_len = 1
    cdef long long cur = sorted_cells[0]
    seg_cells[0] = cur
    for j in range(k):
        acc[j] = <double>vecs[0, j]
    for i in range(1, m):
        if sorted_cells[i] != cur:
            for j in range(k):
                out[seg, j] = <float>(acc[j] / <double>seg_len)
                acc[j] = <double>vecs[i, j]
            seg += 1
            cur = sorted_cells[i]
            seg_cells[seg] = cur
            seg_len = 1
        else:
            for j in range(k):
                acc[j] += <double>vecs[i, j]
            seg_len += 1
    for j in range(k):
        out[seg, j] = <float>(acc[j] / <double>seg_len)
    seg += 1
    return seg_cells_arr[:seg].copy(), out_arr[:seg].copy()


def knn_vote(const int[::1] rows, const int[::1] cols, const float[::1] ranges,
             const int[::1] labels, Py_ssize_t n_rows, Py_ssize_t n_cols,
             const long long[::1] csr_starts, const long long[::1] csr_points,
             Py_ssize_t k, Py_ssize_t window, double cutoff, Py_ssize_t n_classes):
    out_arr = np.asarray(labels).copy()
    cdef int[::1] out = out_arr
    best_d_arr = np.empty(k, dtype=np.float64)
    best_i_arr = np.empty(k, dtype=np.int64)
    votes_arr = np.empty(n_classes, dtype=np.int64)
    cdef double[::1] best_d = best_d_arr
    cdef long long[::1] best_i = best_i_arr
    cdef long long[::1] votes = votes_arr
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t i, dr, dc, rr, cc, s, e, t, j, pos, half = window // 2
    cdef Py_ssize_t n_best, cur, lab, w_label
    cdef long long q, base
    cdef double d, best_count
    for i in range(n):
        if rows[i] < 0:
            continue
        n_best = 0
        for dr in range(-half, half + 1):
            rr = rows[i] + dr
            if rr < 0 or rr >= n_rows:
                continue
            for dc in range(-half, half + 1):
                cc = (cols[i] + dc) % n_cols
                if cc < 0:
                    cc += n_cols
                base = rr * n_cols + cc
                s = csr_starts[base]
                e = csr_starts[base + 1]
                for t in range(s, e):
                    q = csr_points[t]
                    if q == i:
                        continue
                    d = ranges[q] - ranges[i]
                    if d < 0:
                        d = -d
                    if d > cutoff:
                        continue
                    # insertion into the (distance, index)-sorted top-k buffer
                    if n_best < k:
                        pos = n_best
                        n_best += 1
                    elif d < best_d[k - 1] or (d == best_d[k - 1] and q < best_i[k - 1]):
                        pos = k - 1
                    else:
                        continue
                    while pos > 0 and (best_d[pos - 1] > d or
                                       (best_d[pos - 1] == d and best_i[pos - 1] > q)):
                        best_d[pos] = best_d[pos - 1]
                        best_i[pos] = best_i[pos - 1]
                        pos -= 1
                    best_d[pos] = d
                    best_i[pos] = q
        if n_best == 0:
            continue
        for j in range(n_classes):
            votes[j] = 0
        for j in range(n_best):
            votes[labels[best_i[j]]] += 1
        best_count = 0
        w_label = 0
        for j in range(n_classes):
            if votes[j] > best_count:
                best_count = votes[j]
                w_label = j
        cur = labels[i]
        if votes[cur] == best_count:
            out[i] = cur
        else:
            out[i] = w_label
    return out_arr
