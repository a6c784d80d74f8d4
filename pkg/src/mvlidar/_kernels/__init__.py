"""Kernel backend selection.

The hot inner loops exist twice: a Cython extension (``_core``) and a
pure-numpy fallback (``_numpy``) with identical signatures and semantics.
The compiled core is preferred when it has been built; the environment
variable MVLIDAR_BACKEND forces a choice ("compiled" or "numpy"). The
wrappers below normalize dtypes/contiguity before dispatching, so callers
can pass any reasonably-shaped array.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from . import _numpy

try:
    from . import _core
except ImportError:
    _core = None

_BACKENDS = {"numpy": _numpy}
if _core is not None:
    _BACKENDS["compiled"] = _core


def _initial_backend():
    forced = os.environ.get("MVLIDAR_BACKEND", "").strip().lower()
    if forced in ("", "auto"):
        return _BACKENDS.get("compiled", _numpy)
    if forced in ("numpy", "python", "fallback"):
        return _numpy
    if forced in ("compiled", "cython", "c"):
        if _core is None:
            raise ImportError(
                "MVLIDAR_BACKEND=compiled but the extension is not built; "
                "run `pip install -e .` with a C compiler available")
        return _core
    raise ValueError(f"unknown MVLIDAR_BACKEND value: {forced!r}")


_active = _initial_backend()


def current_backend() -> str:
    return _active.name


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def use_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    _active = _BACKENDS[name]


@contextmanager
def backend(name: str):
    """Temporarily switch the kernel backend (for tests and benchmarks)."""
    prev = _active.name
    use_backend(name)
    try:
        yield
    finally:
        use_backend(prev)


def _f32(a):
    return np.ascontiguousarray(a, dtype=np.float32)


def conv2d(x, w, bias=None, stride=1):
    """Same-padding direct convolution; see backend docstrings."""
    return _active.conv2d(_f32(x), _f32(w),
                          None if bias is None else _f32(bias), int(stride))


def deconv2d(x, w, bias=None):
    """2x2 stride-2 transposed convolution (exact 2x upsample)."""
    return _active.deconv2d(_f32(x), _f32(w),
                            None if bias is None else _f32(bias))


def minrange_bin(rows, cols, ranges, n_rows, n_cols):
    return _active.minrange_bin(
        np.ascontiguousarray(rows, dtype=np.int32),
        np.ascontiguousarray(cols, dtype=np.int32),
        _f32(ranges), int(n_rows), int(n_cols))


def sort_by_cell(cells):
    return _active.sort_by_cell(np.ascontiguousarray(cells, dtype=np.int64))


def spherical_bins(xyz, n_rows, n_cols, fov_up, fov_down):
    return _active.spherical_bins(_f32(xyz), int(n_rows), int(n_cols),
                                  float(fov_up), float(fov_down))


def bev_segments(sorted_cells, z, intensity):
    return _active.bev_segments(
        np.ascontiguousarray(sorted_cells, dtype=np.int64),
        _f32(z), _f32(intensity))


def segment_mean_rows(sorted_cells, vecs):
    return _active.segment_mean_rows(
        np.ascontiguousarray(sorted_cells, dtype=np.int64), _f32(vecs))


def knn_vote(rows, cols, ranges, labels, n_rows, n_cols,
             csr_starts, csr_points, k, window, cutoff, n_classes):
    return _active.knn_vote(
        np.ascontiguousarray(rows, dtype=np.int32),
        np.ascontiguousarray(cols, dtype=np.int32),
        _f32(ranges),
        np.ascontiguousarray(labels, dtype=np.int32),
        int(n_rows), int(n_cols),
        np.ascontiguousarray(csr_starts, dtype=np.int64),
        np.ascontiguousarray(csr_points, dtype=np.int64),
        int(k), int(window), float(cutoff), int(n_classes))
