"""From stage-2 grids to object instances.

Cells whose class confidence beats the threshold are decoded into oriented
boxes ((dx, dy) points from the cell center to the object centroid), the
regressed centroids are clustered per class with DBSCAN, and each cluster
is averaged into one detection. Orientation averages circularly via the
regressed (sin, cos) components, so wrap-around angles aggregate
correctly.

Detection interchange: one text line per object,
``class cx cy width length yaw confidence`` (meters/radians, 6 decimals),
plus an equivalent JSON form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateBox, EmptyCluster, MalformedFile
from .pointcloud import DET3_NAMES, DET_PEDESTRIAN, DET_UNKNOWN, DET_VEHICLE
from .projection import BevConfig


@dataclass(frozen=True)
class BoxParams:
    """Raw per-cell regression output: offset to centroid, size, orientation."""

    dx: float
    dy: float
    width: float
    length: float
    sin: float
    cos: float


@dataclass(frozen=True)
class OrientedBox:
    """A decoded BEV detection in ego meters."""

    cx: float
    cy: float
    width: float
    length: float
    yaw: float  # radians in (-pi, pi]
    cls: int = DET_UNKNOWN
    confidence: float = 1.0

    def __post_init__(self):
        if self.width <= 0 or self.length <= 0:
            raise DegenerateBox(
                f"box dimensions must be positive, got {self.width} x {self.length}")

    @property
    def range(self) -> float:
        return math.hypot(self.cx, self.cy)

    def corners(self) -> np.ndarray:
        """(4, 2) corners in counter-clockwise order; length runs along yaw."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


@dataclass(frozen=True)
class ClusterConfig:
    """DBSCAN and thresholding knobs (no canonical values; tune per sensor)."""

    eps: float = 0.8
    min_pts: int = 3
    confidence_threshold: float = 0.5
    per_class_threshold: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")

    def threshold_for(self, cls: int) -> float:
        return self.per_class_threshold.get(cls, self.confidence_threshold)


def normalize_yaw(yaw: float) -> float:
    """Wrap into (-pi, pi]."""
    y = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if y <= 0.0:
        y += 2.0 * math.pi
    return y - math.pi


def out_cell_center(i, j, cfg: BevConfig):
    """Ego-frame center of output cell (i, j); i bins x, j bins y."""
    out_w, out_l = cfg.out_cells
    half = cfg.extent / 2.0
    return (-half + (np.asarray(i) + 0.5) * (cfg.extent / out_w),
            -half + (np.asarray(j) + 0.5) * (cfg.extent / out_l))


def threshold_cells(class_grid: np.ndarray, cfg: ClusterConfig):
    """Cells whose best non-unknown class probability beats its threshold.

    class_grid is the softmaxed (3, h, w) output. Returns (ii, jj, cls,
    confidence) arrays in row-major cell order; the comparison is strict,
    so a cell exactly at the threshold is excluded. Unknown never emits.
    """
    obj = class_grid[[DET_VEHICLE, DET_PEDESTRIAN], :, :]
    cls = obj.argmax(axis=0)
    conf = obj.max(axis=0)
    thr = np.array([cfg.threshold_for(DET_VEHICLE),
                    cfg.threshold_for(DET_PEDESTRIAN)])
    ii, jj = np.nonzero(conf > thr[cls])
    return ii, jj, cls[ii, jj].astype(np.int64), conf[ii, jj].astype(np.float64)


def decode_cell(cell: tuple[int, int], params: BoxParams, cfg: BevConfig,
                cls: int = DET_UNKNOWN, confidence: float = 1.0) -> OrientedBox:
    """One cell's regression values -> an oriented box in ego meters.

    Raises DegenerateBox when the regressed dimensions are non-positive
    (such cells are discarded upstream in the array path).
    """
    x0, y0 = out_cell_center(cell[0], cell[1], cfg)
    if params.width <= 0 or params.length <= 0:
        raise DegenerateBox(
            f"cell {cell}: non-positive dimensions "
            f"{params.width} x {params.length}")
    return OrientedBox(cx=float(x0 + params.dx), cy=float(y0 + params.dy),
                       width=params.width, length=params.length,
                       yaw=normalize_yaw(math.atan2(params.sin, params.cos)),
                       cls=cls, confidence=confidence)


def encode_box(box: OrientedBox, cell: tuple[int, int], cfg: BevConfig) -> BoxParams:
    """Inverse of decode_cell: the regression target a cell would carry."""
    x0, y0 = out_cell_center(cell[0], cell[1], cfg)
    return BoxParams(dx=box.cx - float(x0), dy=box.cy - float(y0),
                     width=box.width, length=box.length,
                     sin=math.sin(box.yaw), cos=math.cos(box.yaw))


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Euclidean DBSCAN; returns a cluster id per point, -1 for noise.

    A point is core when its eps-ball (itself included) holds at least
    min_pts points. Expansion proceeds in ascending index order, so the
    labeling is deterministic for a given input order; border points join
    the first cluster that reaches them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, -2, dtype=np.int64)  # -2 unvisited, -1 noise
    eps2 = eps * eps

    def region(i):
        d2 = ((pts - pts[i]) ** 2).sum(axis=1)
        return np.flatnonzero(d2 <= eps2)

    cluster = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        nb = region(i)
        if len(nb) < min_pts:
            labels[i] = -1
            continue
        labels[i] = cluster
        seeds = [int(q) for q in nb if q != i]
        k = 0
        while k < len(seeds):
            q = seeds[k]
            k += 1
            if labels[q] == -1:
                labels[q] = cluster  # border point claimed by this cluster
            if labels[q] != -2:
                continue
            labels[q] = cluster
            nq = region(q)
            if len(nq) >= min_pts:
                seeds.extend(int(t) for t in nq if labels[t] == -2 or labels[t] == -1)
        cluster += 1
    labels[labels == -2] = -1
    return labels


def aggregate_cluster(members, sincos=None) -> OrientedBox:
    """Average a cluster of boxes into one detection.

    Centroid, dimensions and confidence are arithmetic means; yaw is the
    circular mean atan2(mean sin, mean cos). `sincos` optionally supplies
    the raw regressed (sin, cos) rows, pre-normalization, as the network
    emitted them; otherwise unit components are taken from each yaw.
    """
    members = list(members)
    if not members:
        raise EmptyCluster("cannot aggregate an empty cluster")
    if sincos is None:
        sincos = np.array([[math.sin(b.yaw), math.cos(b.yaw)] for b in members])
    else:
        sincos = np.asarray(sincos, dtype=np.float64).reshape(len(members), 2)
    cls = members[0].cls
    if any(b.cls != cls for b in members):
        raise ValueError("cluster members must share one class")

    def mean(values):
        return float(np.mean(values, dtype=np.float64))

    return OrientedBox(
        cx=mean([b.cx for b in members]),
        cy=mean([b.cy for b in members]),
        width=mean([b.width for b in members]),
        length=mean([b.length for b in members]),
        yaw=normalize_yaw(math.atan2(sincos[:, 0].mean(), sincos[:, 1].mean())),
        cls=cls,
        confidence=mean([b.confidence for b in members]))


def extract_detections(class_grid: np.ndarray, box_grid: np.ndarray,
                       bev_cfg: BevConfig | None = None,
                       cluster_cfg: ClusterConfig | None = None) -> list[OrientedBox]:
    """Full tail: threshold -> decode -> per-class DBSCAN -> cluster means.

    Cells with non-positive regressed dimensions are discarded before
    clustering; noise cells produce no detections.
    """
    if bev_cfg is None:
        bev_cfg = BevConfig()
    if cluster_cfg is None:
        cluster_cfg = ClusterConfig()
    ii, jj, cls, conf = threshold_cells(class_grid, cluster_cfg)
    if len(ii) == 0:
        return []
    dx, dy, w, l, s, c = (box_grid[ch, ii, jj].astype(np.float64) for ch in range(6))
    x0, y0 = out_cell_center(ii, jj, bev_cfg)
    cx, cy = x0 + dx, y0 + dy
    good = (w > 0) & (l > 0)

    detections: list[OrientedBox] = []
    for k in (DET_VEHICLE, DET_PEDESTRIAN):
        sel = np.flatnonzero(good & (cls == k))
        if len(sel) == 0:
            continue
        ids = dbscan(np.column_stack([cx[sel], cy[sel]]),
                     cluster_cfg.eps, cluster_cfg.min_pts)
        for cid in range(ids.max() + 1 if len(ids) else 0):
            m = sel[ids == cid]
            detections.append(OrientedBox(
                cx=float(cx[m].mean()), cy=float(cy[m].mean()),
                width=float(w[m].mean()), length=float(l[m].mean()),
                yaw=normalize_yaw(math.atan2(s[m].mean(), c[m].mean())),
                cls=int(k), confidence=float(conf[m].mean())))
    return detections


# ---------------------------------------------------------------- IO

def format_detection(box: OrientedBox) -> str:
    return (f"{DET3_NAMES[box.cls]} {box.cx:.6f} {box.cy:.6f} "
            f"{box.width:.6f} {box.length:.6f} {box.yaw:.6f} "
            f"{box.confidence:.6f}")


def parse_detection(line: str, where: str = "<line>") -> OrientedBox:
    parts = line.split()
    if len(parts) != 7:
        raise MalformedFile(f"{where}: expected 7 fields, got {len(parts)}")
    if parts[0] not in DET3_NAMES:
        raise MalformedFile(f"{where}: unknown class {parts[0]!r}")
    try:
        vals = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise MalformedFile(f"{where}: non-numeric field") from exc
    return OrientedBox(cx=vals[0], cy=vals[1], width=vals[2], length=vals[3],
                       yaw=vals[4], cls=DET3_NAMES.index(parts[0]),
                       confidence=vals[5])


def save_detections_txt(boxes, path) -> None:
    Path(path).write_text("".join(format_detection(b) + "\n" for b in boxes))


def load_detections_txt(path) -> list[OrientedBox]:
    boxes = []
    for no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            boxes.append(parse_detection(line, f"{path}:{no}"))
    return boxes


def box_to_dict(box: OrientedBox) -> dict:
    return {"class": DET3_NAMES[box.cls], "cx": box.cx, "cy": box.cy,
            "width": box.width, "length": box.length, "yaw": box.yaw,
            "confidence": box.confidence}


def box_from_dict(d: dict) -> OrientedBox:
    return OrientedBox(cx=d["cx"], cy=d["cy"], width=d["width"],
                       length=d["length"], yaw=d["yaw"],
                       cls=DET3_NAMES.index(d["class"]),
                       confidence=d["confidence"])


def save_detections_json(boxes, path) -> None:
    Path(path).write_text(
        json.dumps({"detections": [box_to_dict(b) for b in boxes]}, indent=1))


def load_detections_json(path) -> list[OrientedBox]:
    doc = json.loads(Path(path).read_text())
    return [box_from_dict(d) for d in doc["detections"]]
