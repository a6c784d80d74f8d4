"""Deterministic synthetic fixtures for tests and benchmarks.

Clouds mimic a ground plane plus scattered obstacles (no realism claimed;
the geometry just exercises every code path: full azimuth coverage, the
vertical FOV, in/out-of-extent points). Detection grids are built by
encoding known boxes into patches of output cells, giving an exact
ground truth for the decode -> cluster -> aggregate tail.
"""

from __future__ import annotations

import math

import numpy as np

from .pointcloud import DET_UNKNOWN, PointCloud
from .postprocess import OrientedBox, encode_box
from .projection import BevConfig


def make_cloud(n: int, seed: int = 0, extent: float = 80.0) -> PointCloud:
    """A plausible scan: ground-plane disk plus boxy obstacle clusters."""
    rng = np.random.default_rng(seed)
    n_ground = int(n * 0.7)
    n_obj = n - n_ground

    r = extent / 2.0 * np.sqrt(rng.uniform(0.01, 1.0, n_ground))
    az = rng.uniform(-math.pi, math.pi, n_ground)
    gx = r * np.cos(az)
    gy = r * np.sin(az)
    gz = rng.normal(-1.7, 0.02, n_ground)

    n_clusters = max(1, n_obj // 600)
    centers = rng.uniform(-extent / 2 * 0.8, extent / 2 * 0.8, (n_clusters, 2))
    pick = rng.integers(0, n_clusters, n_obj)
    ox = centers[pick, 0] + rng.normal(0, 1.2, n_obj)
    oy = centers[pick, 1] + rng.normal(0, 1.2, n_obj)
    oz = rng.uniform(-1.6, 0.5, n_obj)

    pts = np.empty((n, 4), np.float32)
    pts[:, 0] = np.concatenate([gx, ox])
    pts[:, 1] = np.concatenate([gy, oy])
    pts[:, 2] = np.concatenate([gz, oz])
    pts[:, 3] = rng.uniform(0.0, 1.0, n)
    return PointCloud.from_array(pts)


def make_detection_grids(boxes: list[OrientedBox], cfg: BevConfig | None = None,
                         patch: int = 3):
    """Paint boxes into stage-2 style output grids.

    Each box occupies a patch x patch block of output cells around its
    centroid cell; every painted cell carries the exact encoding of the
    box (offset to the true centroid, true size and orientation) and a
    class distribution putting `confidence` on the box class with the
    remainder on unknown. Returns (class_grid, box_grid).
    """
    if cfg is None:
        cfg = BevConfig()
    out_w, out_l = cfg.out_cells
    class_grid = np.zeros((3, out_w, out_l), np.float32)
    class_grid[DET_UNKNOWN] = 1.0
    box_grid = np.zeros((6, out_w, out_l), np.float32)
    half = cfg.extent / 2.0
    for box in boxes:
        ci = int((box.cx + half) / (cfg.extent / out_w))
        cj = int((box.cy + half) / (cfg.extent / out_l))
        r = patch // 2
        for i in range(max(0, ci - r), min(out_w, ci + r + 1)):
            for j in range(max(0, cj - r), min(out_l, cj + r + 1)):
                p = encode_box(box, (i, j), cfg)
                box_grid[:, i, j] = (p.dx, p.dy, p.width, p.length, p.sin, p.cos)
                class_grid[:, i, j] = 0.0
                class_grid[box.cls, i, j] = box.confidence
                class_grid[DET_UNKNOWN, i, j] = 1.0 - box.confidence
    return class_grid, box_grid
