"""Range-image and bird's-eye-view projections of LiDAR sweeps.

Two representations feed the networks:

* the perspective range image — points binned by elevation (rows) and
  azimuth (columns), keeping the nearest point per cell; channels are
  range, intensity and height z;
* the top-down BEV grids — points binned on a square ground-plane raster
  centered on the ego vehicle, aggregated into min/max height and mean
  intensity, plus per-cell mean class-probability vectors reprojected
  from the range image.

Binning conventions (fixed here, configurable sizes): azimuth 0 is +x
(vehicle forward) and columns increase clockwise; row 0 is the top of the
vertical field of view. BEV grid axis 0 bins x and axis 1 bins y, both
half-open over [-extent/2, extent/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as kernels
from .errors import ShapeMismatch
from .pointcloud import (SEG_UNKNOWN, TAXONOMY_SEG7, PointCloud, PointLabels)

N_SEG_CLASSES = 7


@dataclass(frozen=True)
class RangeImageConfig:
    """Geometry of the perspective projection."""

    n_rows: int = 64
    n_cols: int = 2048
    fov_up: float = math.radians(3.0)     # HDL-64E nominal
    fov_down: float = math.radians(-25.0)

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("range image needs at least one row and column")
        if not self.fov_down < self.fov_up:
            raise ValueError("fov_down must be below fov_up")

    @classmethod
    def from_degrees(cls, n_rows=64, n_cols=2048, fov_up_deg=3.0,
                     fov_down_deg=-25.0) -> "RangeImageConfig":
        return cls(n_rows, n_cols, math.radians(fov_up_deg),
                   math.radians(fov_down_deg))


@dataclass
class RangeImage:
    """Perspective projection of one sweep.

    channels: (3, n_rows, n_cols) float32 — range m, intensity, height z m.
    occupancy: boolean mask of non-empty cells.
    index_map: per-cell index of the minimum-range point (-1 when empty).
    """

    channels: np.ndarray
    occupancy: np.ndarray
    index_map: np.ndarray
    cfg: RangeImageConfig
    n_points: int
    n_dropped: int  # out of FOV or zero range

    @property
    def n_occupied(self) -> int:
        return int(self.occupancy.sum())

    @property
    def n_shadowed(self) -> int:
        """Points binned to a cell but shadowed by a nearer one."""
        return self.n_points - self.n_dropped - self.n_occupied


def point_bins(cloud: PointCloud, cfg: RangeImageConfig):
    """Per-point range-image cell assignment.

    Returns (rows, cols, ranges, valid): int32 bins, float32 ranges, and a
    mask of points inside the FOV with positive range. rows/cols are
    meaningful only where valid. The row comes from
    floor(n_rows * (fov_up - elevation) / (fov_up - fov_down)) clamped into
    range for in-FOV points; the column from
    floor(n_cols * (1 - (azimuth/pi + 1)/2)) wrapped mod n_cols.
    """
    return kernels.spherical_bins(cloud.xyz, cfg.n_rows, cfg.n_cols,
                                  cfg.fov_up, cfg.fov_down)


def spherical_project(cloud: PointCloud, cfg: RangeImageConfig | None = None) -> RangeImage:
    """Bin a sweep into the range image; nearest point per cell wins.

    Range ties break toward the lower point index, so the result does not
    depend on point order beyond the indices themselves. Out-of-FOV and
    zero-range points are dropped and counted.
    """
    if cfg is None:
        cfg = RangeImageConfig()
    rows, cols, ranges, valid = point_bins(cloud, cfg)
    idx = np.flatnonzero(valid)
    winner_local = kernels.minrange_bin(rows[idx], cols[idx], ranges[idx],
                                        cfg.n_rows, cfg.n_cols)
    if idx.size:
        index_map = np.where(winner_local >= 0, idx[winner_local.clip(min=0)], -1)
    else:
        index_map = np.full((cfg.n_rows, cfg.n_cols), -1, dtype=np.int64)

    channels = np.zeros((3, cfg.n_rows, cfg.n_cols), np.float32)
    occupancy = index_map >= 0
    win = index_map[occupancy]
    channels[0][occupancy] = ranges[win]
    channels[1][occupancy] = cloud.intensity[win]
    channels[2][occupancy] = cloud.z[win]
    return RangeImage(channels=channels, occupancy=occupancy,
                      index_map=index_map, cfg=cfg, n_points=len(cloud),
                      n_dropped=int(len(cloud) - valid.sum()))


def unproject_labels(cell_labels: np.ndarray, range_img: RangeImage,
                     cloud: PointCloud) -> PointLabels:
    """Give every point the label of the range-image cell it bins into.

    Accepts either a (n_rows, n_cols) label grid or a (7, n_rows, n_cols)
    probability grid (argmax taken per cell). Cells are recomputed for all
    points, not just per-cell winners; points dropped at projection time
    get `unknown`.
    """
    grid = np.asarray(cell_labels)
    if grid.ndim == 3:
        grid = grid.argmax(axis=0)
    if grid.shape != (range_img.cfg.n_rows, range_img.cfg.n_cols):
        raise ShapeMismatch(
            f"label grid {grid.shape} does not match range image "
            f"({range_img.cfg.n_rows}, {range_img.cfg.n_cols})")
    rows, cols, _, valid = point_bins(cloud, range_img.cfg)
    out = np.full(len(cloud), SEG_UNKNOWN, dtype=np.int32)
    out[valid] = grid[rows[valid], cols[valid]]
    return PointLabels.from_array(out, TAXONOMY_SEG7)


def knn_smooth(labels: PointLabels, cloud: PointCloud, range_img: RangeImage,
               k: int = 5, window: int = 5, cutoff: float = 1.0) -> PointLabels:
    """Clean up projection bleeding with a k-nearest-neighbour vote.

    Each point is re-labelled by the majority vote of its k nearest
    neighbours (by absolute range difference, within `cutoff` meters)
    among the points binned to the window x window cells around its own
    range-image cell. Vote ties keep the current label, then take the
    lowest class id; points with no eligible neighbour keep their label.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    rows, cols, ranges, valid = point_bins(cloud, range_img.cfg)
    rows = np.where(valid, rows, -1)

    n_cells = range_img.cfg.n_rows * range_img.cfg.n_cols
    flat = np.where(valid, rows.astype(np.int64) * range_img.cfg.n_cols + cols, 0)
    idx = np.flatnonzero(valid)
    order = idx[np.argsort(flat[idx], kind="stable")]
    counts = np.bincount(flat[idx], minlength=n_cells)
    starts = np.zeros(n_cells + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])

    smoothed = kernels.knn_vote(rows, cols, ranges, labels.ids,
                                range_img.cfg.n_rows, range_img.cfg.n_cols,
                                starts, order, k, window, cutoff,
                                N_SEG_CLASSES)
    return PointLabels.from_array(smoothed, labels.taxonomy)


@dataclass(frozen=True)
class BevConfig:
    """Geometry of the top-down raster: square extent centered on ego."""

    width_cells: int = 1024   # x bins (grid axis 0)
    length_cells: int = 1024  # y bins (grid axis 1)
    extent: float = 80.0      # meters covered along each axis
    out_stride: int = 4       # input cells per output cell along each axis

    def __post_init__(self):
        if self.width_cells < 1 or self.length_cells < 1:
            raise ValueError("BEV grid needs at least one cell per axis")
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.width_cells % self.out_stride or self.length_cells % self.out_stride:
            raise ValueError("cell counts must be divisible by out_stride")

    @property
    def cell_size(self) -> float:
        return self.extent / self.width_cells

    @property
    def cell_size_y(self) -> float:
        return self.extent / self.length_cells

    @property
    def out_cells(self) -> tuple[int, int]:
        return self.width_cells // self.out_stride, self.length_cells // self.out_stride

    @property
    def out_cell_size(self) -> float:
        return self.extent / (self.width_cells // self.out_stride)


@dataclass
class BevRaster:
    """Height statistics and per-cell point lists from one sweep.

    height: (3, width_cells, length_cells) float32 — min z, max z, mean
    intensity. cell_of_point maps each point to its flattened cell id
    (-1 outside the extent). Point lists are stored compactly: seg_cells
    holds the occupied flattened cell ids (ascending) and
    sorted_points[seg_starts[k]:seg_starts[k+1]] are the point indices of
    cell seg_cells[k], ascending.
    """

    height: np.ndarray
    occupancy: np.ndarray
    cell_of_point: np.ndarray
    seg_cells: np.ndarray
    seg_starts: np.ndarray
    sorted_points: np.ndarray
    cfg: BevConfig
    n_dropped: int

    @property
    def n_inside(self) -> int:
        return int(self.sorted_points.size)

    def points_in_cell(self, cell: int) -> np.ndarray:
        """Indices of the points binned to a flattened cell id."""
        k = int(np.searchsorted(self.seg_cells, cell))
        if k == len(self.seg_cells) or self.seg_cells[k] != cell:
            return np.empty(0, np.int64)
        return self.sorted_points[self.seg_starts[k]:self.seg_starts[k + 1]]


@dataclass
class BevGrid:
    """Dense network input: reprojected semantics plus height channels."""

    semantic: np.ndarray   # (7, width_cells, length_cells) float32
    height: np.ndarray     # (3, width_cells, length_cells) float32
    occupancy: np.ndarray  # (width_cells, length_cells) bool


def bev_cell_of_point(cloud: PointCloud, cfg: BevConfig) -> np.ndarray:
    """Flattened BEV cell id per point; -1 outside the half-open extent."""
    half = cfg.extent / 2.0
    x = cloud.x.astype(np.float64)
    y = cloud.y.astype(np.float64)
    ix = np.floor((x + half) / cfg.cell_size).astype(np.int64)
    iy = np.floor((y + half) / cfg.cell_size_y).astype(np.int64)
    inside = (ix >= 0) & (ix < cfg.width_cells) & (iy >= 0) & (iy < cfg.length_cells)
    return np.where(inside, ix * cfg.length_cells + iy, -1)


def bev_rasterize(cloud: PointCloud, cfg: BevConfig | None = None) -> BevRaster:
    """Accumulate per-cell min z, max z and mean intensity on the BEV grid.

    Per-cell reductions run over cell-sorted points (ascending point
    index within a cell), so results do not depend on input chunking.
    """
    if cfg is None:
        cfg = BevConfig()
    cells = bev_cell_of_point(cloud, cfg)
    idx = np.flatnonzero(cells >= 0)
    sorted_points = idx[kernels.sort_by_cell(cells[idx])]
    seg_cells, seg_starts, min_z, max_z, mean_i = kernels.bev_segments(
        cells[sorted_points], cloud.z[sorted_points],
        cloud.intensity[sorted_points])

    shape = (cfg.width_cells, cfg.length_cells)
    height = np.zeros((3, cfg.width_cells * cfg.length_cells), np.float32)
    height[0, seg_cells] = min_z
    height[1, seg_cells] = max_z
    height[2, seg_cells] = mean_i
    occupancy = np.zeros(cfg.width_cells * cfg.length_cells, bool)
    occupancy[seg_cells] = True
    return BevRaster(height=height.reshape(3, *shape),
                     occupancy=occupancy.reshape(shape),
                     cell_of_point=cells, seg_cells=seg_cells,
                     seg_starts=seg_starts, sorted_points=sorted_points,
                     cfg=cfg, n_dropped=int(len(cloud) - idx.size))


def reproject_semantics(probs: np.ndarray, range_img: RangeImage,
                        cloud: PointCloud, cfg: BevConfig | None = None,
                        raster: BevRaster | None = None) -> np.ndarray:
    """Carry per-cell class probabilities down to the BEV grid.

    Every point takes the probability vector of its range-image cell
    (points dropped at range projection carry a one-hot `unknown`);
    each BEV cell stores the arithmetic mean over its points, so occupied
    cells still sum to 1. Empty cells are all-zero. Passing the sweep's
    BevRaster reuses its cell sort instead of recomputing it.
    """
    if cfg is None:
        cfg = raster.cfg if raster is not None else BevConfig()
    probs = np.asarray(probs, dtype=np.float32)
    if probs.shape != (N_SEG_CLASSES, range_img.cfg.n_rows, range_img.cfg.n_cols):
        raise ShapeMismatch(
            f"probability grid {probs.shape} does not match range image config "
            f"({N_SEG_CLASSES}, {range_img.cfg.n_rows}, {range_img.cfg.n_cols})")
    rows, cols, _, valid = point_bins(cloud, range_img.cfg)
    if raster is not None and raster.cfg == cfg \
            and len(raster.cell_of_point) == len(cloud):
        cells, sorted_points = raster.cell_of_point, raster.sorted_points
    else:
        cells = bev_cell_of_point(cloud, cfg)
        idx = np.flatnonzero(cells >= 0)
        sorted_points = idx[kernels.sort_by_cell(cells[idx])]

    vecs = np.zeros((len(sorted_points), N_SEG_CLASSES), np.float32)
    v = valid[sorted_points]
    vecs[v] = probs[:, rows[sorted_points[v]], cols[sorted_points[v]]].T
    vecs[~v, SEG_UNKNOWN] = 1.0

    seg_cells, means = kernels.segment_mean_rows(cells[sorted_points], vecs)
    out = np.zeros((N_SEG_CLASSES, cfg.width_cells * cfg.length_cells),
                   np.float32)
    out[:, seg_cells] = means.T
    return out.reshape(N_SEG_CLASSES, cfg.width_cells, cfg.length_cells)


def build_bev_grid(probs: np.ndarray, range_img: RangeImage, cloud: PointCloud,
                   cfg: BevConfig | None = None,
                   raster: BevRaster | None = None) -> BevGrid:
    """Assemble the full second-stage input from stage-1 probabilities."""
    if cfg is None:
        cfg = BevConfig()
    if raster is None:
        raster = bev_rasterize(cloud, cfg)
    semantic = reproject_semantics(probs, range_img, cloud, cfg, raster=raster)
    return BevGrid(semantic=semantic, height=raster.height,
                   occupancy=raster.occupancy)


# Golden-file serialization: grids as named-tensor blobs (float32 payloads).
# The FOV doubles travel as raw bit patterns (a float32 view), so configs
# reload bit-exactly; index maps fit float32 exactly below 2^24 points.

def save_range_image(img: RangeImage, path) -> None:
    from .nn.blob import save_blob
    if img.n_points >= 1 << 24:
        raise ValueError("index map too large for exact float32 payloads")
    meta = [img.cfg.n_rows, img.cfg.n_cols, img.n_points, img.n_dropped]
    save_blob({
        "channels": img.channels,
        "occupancy": img.occupancy.astype(np.float32),
        "index_map": img.index_map.astype(np.float32),
        "meta": np.array(meta, np.float32),
        "fov_bits": np.array([img.cfg.fov_up, img.cfg.fov_down],
                             np.float64).view(np.float32),
    }, path)


def load_range_image(path) -> RangeImage:
    from .nn.blob import load_blob
    store = load_blob(path)
    meta = store["meta"]
    fov_up, fov_down = store["fov_bits"].view(np.float64)
    cfg = RangeImageConfig(n_rows=int(meta[0]), n_cols=int(meta[1]),
                           fov_up=float(fov_up), fov_down=float(fov_down))
    return RangeImage(channels=store["channels"],
                      occupancy=store["occupancy"] != 0,
                      index_map=store["index_map"].astype(np.int64),
                      cfg=cfg, n_points=int(meta[2]), n_dropped=int(meta[3]))


def save_bev_grid(grid: BevGrid, path) -> None:
    from .nn.blob import save_blob
    save_blob({
        "semantic": grid.semantic,
        "height": grid.height,
        "occupancy": grid.occupancy.astype(np.float32),
    }, path)


def load_bev_grid(path) -> BevGrid:
    from .nn.blob import load_blob
    store = load_blob(path)
    return BevGrid(semantic=store["semantic"], height=store["height"],
                   occupancy=store["occupancy"] != 0)
