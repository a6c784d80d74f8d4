"""Scan-to-detections orchestration and the text pipeline config.

run_pipeline chains: spherical projection -> stage-1 segmentation ->
label unprojection (optionally kNN-smoothed) -> semantic reprojection +
BEV rasterization -> stage-2 detection -> threshold/DBSCAN/aggregate.
All intermediate artifacts stay on the output object for inspection.

Config files are flat ``key = value`` text; see DEFAULT_CONFIG_TEXT for
the full key list with defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .network import Graph, infer_stage1, infer_stage2
from .pointcloud import DET3_NAMES, SEG_ROAD, PointCloud, PointLabels
from .postprocess import ClusterConfig, OrientedBox, extract_detections
from .projection import (BevConfig, BevGrid, RangeImage, RangeImageConfig,
                         bev_rasterize, build_bev_grid, knn_smooth,
                         spherical_project, unproject_labels)


@dataclass(frozen=True)
class KnnConfig:
    enabled: bool = False
    k: int = 5
    window: int = 5
    cutoff: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    range_cfg: RangeImageConfig = field(default_factory=RangeImageConfig)
    bev_cfg: BevConfig = field(default_factory=BevConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    drivable_threshold: float = 0.5
    weights_stage1: str = ""
    weights_stage2: str = ""
    class_map: str = ""


DEFAULT_CONFIG_TEXT = """\
# perspective projection
range.rows = 64
range.cols = 2048
range.fov_up_deg = 3.0
range.fov_down_deg = -25.0

# bird's-eye view raster
bev.width_cells = 1024
bev.length_cells = 1024
bev.extent = 80.0
bev.out_stride = 4

# kNN label smoothing (the "++" step)
knn.enabled = 0
knn.k = 5
knn.window = 5
knn.cutoff = 1.0

# detection tail
cluster.eps = 0.8
cluster.min_pts = 3
detect.threshold = 0.5
# detect.threshold.vehicle = 0.5
# detect.threshold.pedestrian = 0.5

drivable.threshold = 0.5

# paths (optional; flags override)
# weights.stage1 = stage1.blob
# weights.stage2 = stage2.blob
# classmap = classmap.cfg
"""


def _parse_kv(path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for no, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{no}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def load_pipeline_config(path) -> PipelineConfig:
    pairs = _parse_kv(path)

    def take(key, cast, default):
        if key not in pairs:
            return default
        try:
            return cast(pairs.pop(key))
        except ValueError as exc:
            raise ConfigError(f"{path}: bad value for {key}") from exc

    def fbool(s):
        return bool(int(s))

    try:
        range_cfg = RangeImageConfig.from_degrees(
            take("range.rows", int, 64), take("range.cols", int, 2048),
            take("range.fov_up_deg", float, 3.0),
            take("range.fov_down_deg", float, -25.0))
        bev_cfg = BevConfig(
            take("bev.width_cells", int, 1024),
            take("bev.length_cells", int, 1024),
            take("bev.extent", float, 80.0),
            take("bev.out_stride", int, 4))
        knn = KnnConfig(take("knn.enabled", fbool, False),
                        take("knn.k", int, 5), take("knn.window", int, 5),
                        take("knn.cutoff", float, 1.0))
        per_class = {}
        for i, name in enumerate(DET3_NAMES[:2]):
            v = take(f"detect.threshold.{name}", float, None)
            if v is not None:
                per_class[i] = v
        cluster = ClusterConfig(
            eps=take("cluster.eps", float, 0.8),
            min_pts=take("cluster.min_pts", int, 3),
            confidence_threshold=take("detect.threshold", float, 0.5),
            per_class_threshold=per_class)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = PipelineConfig(
        range_cfg=range_cfg, bev_cfg=bev_cfg, knn=knn, cluster=cluster,
        drivable_threshold=take("drivable.threshold", float, 0.5),
        weights_stage1=take("weights.stage1", str, ""),
        weights_stage2=take("weights.stage2", str, ""),
        class_map=take("classmap", str, ""))
    if pairs:
        raise ConfigError(f"{path}: unknown keys: {', '.join(sorted(pairs))}")
    return cfg


@dataclass
class PipelineOutput:
    """Everything one scan produces, intermediates included."""

    seg_probs: np.ndarray          # (7, rows, cols)
    point_labels: PointLabels      # seg7, one per input point
    drivable_mask: np.ndarray      # (width_cells, length_cells) bool
    class_grid: np.ndarray         # (3, out, out) softmaxed
    box_grid: np.ndarray           # (6, out, out) raw regression
    detections: list[OrientedBox]
    range_image: RangeImage
    bev_grid: BevGrid


def run_pipeline(cloud: PointCloud, stage1: Graph, stage2: Graph,
                 cfg: PipelineConfig | None = None) -> PipelineOutput:
    """Run both stages plus the detection tail on one scan.

    The drivable mask is true exactly where the BEV road-probability
    channel exceeds the drivable threshold. Deterministic end to end.
    """
    if cfg is None:
        cfg = PipelineConfig()
    range_image = spherical_project(cloud, cfg.range_cfg)
    seg_probs = infer_stage1(stage1, range_image)

    labels = unproject_labels(seg_probs, range_image, cloud)
    if cfg.knn.enabled:
        labels = knn_smooth(labels, cloud, range_image,
                            cfg.knn.k, cfg.knn.window, cfg.knn.cutoff)

    raster = bev_rasterize(cloud, cfg.bev_cfg)
    bev_grid = build_bev_grid(seg_probs, range_image, cloud, cfg.bev_cfg,
                              raster=raster)
    class_grid, box_grid = infer_stage2(stage2, bev_grid)
    detections = extract_detections(class_grid, box_grid, cfg.bev_cfg,
                                    cfg.cluster)
    drivable = bev_grid.semantic[SEG_ROAD] > cfg.drivable_threshold
    return PipelineOutput(seg_probs=seg_probs, point_labels=labels,
                          drivable_mask=drivable, class_grid=class_grid,
                          box_grid=box_grid, detections=detections,
                          range_image=range_image, bev_grid=bev_grid)
