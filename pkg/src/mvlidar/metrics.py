"""Evaluation machinery: rotated-box IoU, interpolated AP, segmentation IoU.

Detection matching is greedy in descending confidence: each detection
takes the not-yet-matched ground-truth box of highest IoU when that IoU
reaches the class threshold. AP interpolates max precision at N evenly
spaced recall points (40 by default, switchable). Segmentation quality is
per-class intersection-over-union from the confusion matrix, with the
mean taken over classes present in the ground truth.

Interchange format: the detection text lines prefixed with a frame id,
``frame class cx cy width length yaw confidence``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, MalformedFile
from .pointcloud import (DET3_NAMES, DET_PEDESTRIAN, DET_VEHICLE, PointLabels,
                         SEG7_NAMES)
from .postprocess import OrientedBox, format_detection, parse_detection


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: dict[int, float] = field(
        default_factory=lambda: {DET_VEHICLE: 0.7, DET_PEDESTRIAN: 0.5})
    range_buckets: tuple[tuple[float, float], ...] = ((0.0, 10.0), (10.0, 25.0),
                                                      (25.0, 50.0))
    ap_points: int = 40

    def __post_init__(self):
        for thr in self.iou_thresholds.values():
            if not 0.0 < thr <= 1.0:
                raise ValueError("IoU thresholds must lie in (0, 1]")
        lo = -math.inf
        for a, b in self.range_buckets:
            if a < lo or b <= a:
                raise ValueError("range buckets must be disjoint and ascending")
            lo = b


# ------------------------------------------------------------- rotated IoU

def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(poly: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Keep the part of `poly` left of the directed edge a->b
    (Sutherland-Hodgman step)."""
    if len(poly) == 0:
        return poly
    d = b - a
    side = d[0] * (poly[:, 1] - a[1]) - d[1] * (poly[:, 0] - a[0])
    out = []
    n = len(poly)
    for i in range(n):
        j = (i + 1) % n
        pi, pj = poly[i], poly[j]
        si, sj = side[i], side[j]
        if si >= 0:
            out.append(pi)
        if (si > 0) != (sj > 0) and si != sj and (si < 0 or sj < 0):
            t = si / (si - sj)
            out.append(pi + t * (pj - pi))
    return np.array(out) if out else np.empty((0, 2))


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Exact IoU of two oriented rectangles via convex polygon clipping."""
    pa, pb = a.corners(), b.corners()
    inter = pa
    for i in range(4):
        inter = _clip_polygon(inter, pb[i], pb[(i + 1) % 4])
        if len(inter) == 0:
            return 0.0
    ia = _polygon_area(inter)
    union = a.width * a.length + b.width * b.length - ia
    return ia / union if union > 0 else 0.0


# ------------------------------------------------------------- AP

def _greedy_match(dets: list[OrientedBox], gts: list[OrientedBox],
                  iou_thr: float):
    """TP flags for one frame's detections, in descending confidence.

    Returns (order, tp) with `order` the detection indices sorted by
    confidence (ties keep input order).
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    matched = [False] * len(gts)
    tp = np.zeros(len(dets), bool)
    for rank, di in enumerate(order):
        best, best_iou = -1, 0.0
        for gi, gt in enumerate(gts):
            if matched[gi]:
                continue
            iou = rotated_iou(dets[di], gt)
            if iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0 and best_iou >= iou_thr:
            matched[best] = True
            tp[rank] = True
    return order, tp


def _interpolated_ap(tp_sorted: np.ndarray, n_gt: int, n_points: int) -> float:
    """Interpolated AP from globally confidence-sorted TP flags."""
    if n_gt == 0:
        return 0.0
    cum_tp = np.cumsum(tp_sorted)
    cum_fp = np.cumsum(~tp_sorted)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)
    levels = np.arange(1, n_points + 1) / n_points
    total = 0.0
    for r in levels:
        ok = recall >= r
        total += float(precision[ok].max()) if ok.any() else 0.0
    return total / n_points


def match_and_ap(dets: dict[str, list[OrientedBox]],
                 gts: dict[str, list[OrientedBox]],
                 cfg: EvalConfig, cls: int) -> float | None:
    """Average precision for one class over a set of frames.

    Inputs map frame id -> boxes; only boxes of `cls` participate. Returns
    None when there are neither ground-truth boxes nor detections.
    """
    thr = cfg.iou_thresholds.get(cls, 0.5)
    rows = []  # (confidence, frame_order, tp)
    n_gt = 0
    for fo, frame in enumerate(sorted(set(dets) | set(gts))):
        d = [b for b in dets.get(frame, []) if b.cls == cls]
        g = [b for b in gts.get(frame, []) if b.cls == cls]
        n_gt += len(g)
        order, tp = _greedy_match(d, g, thr)
        for rank, di in enumerate(order):
            rows.append((d[di].confidence, fo, rank, bool(tp[rank])))
    if not rows and n_gt == 0:
        return None
    if not rows:
        return 0.0
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    tp_sorted = np.array([r[3] for r in rows], bool)
    return _interpolated_ap(tp_sorted, n_gt, cfg.ap_points)


def range_bucketed_ap(dets: dict[str, list[OrientedBox]],
                      gts: dict[str, list[OrientedBox]],
                      cfg: EvalConfig):
    """AP per class per range bucket; boxes outside every bucket are ignored.

    Buckets are half-open [lo, hi) on centroid range. Result maps
    class id -> {(lo, hi): ap-or-None}.
    """
    def in_bucket(box, lo, hi):
        return lo <= box.range < hi

    out: dict[int, dict[tuple[float, float], float | None]] = {}
    for cls in (DET_VEHICLE, DET_PEDESTRIAN):
        per = {}
        for lo, hi in cfg.range_buckets:
            d = {f: [b for b in bs if in_bucket(b, lo, hi)] for f, bs in dets.items()}
            g = {f: [b for b in bs if in_bucket(b, lo, hi)] for f, bs in gts.items()}
            per[(lo, hi)] = match_and_ap(d, g, cfg, cls)
        out[cls] = per
    return out


# ------------------------------------------------------------- segmentation

@dataclass
class SegReport:
    confusion: np.ndarray        # (k, k) int64, rows = ground truth
    per_class_iou: np.ndarray    # (k,) float64, NaN where undefined (0/0)
    mean_iou: float              # mean over classes present in ground truth
    n_points: int


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, k: int) -> np.ndarray:
    idx = gt.astype(np.int64) * k + pred.astype(np.int64)
    return np.bincount(idx, minlength=k * k).reshape(k, k)


def report_from_confusion(cm: np.ndarray) -> SegReport:
    """Per-class IoU_c = TP / (TP + FP + FN) plus the mean over GT classes."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    present = cm.sum(axis=1) > 0
    mean = float(np.nanmean(np.where(present, iou, np.nan))) \
        if present.any() else float("nan")
    return SegReport(confusion=np.asarray(cm), per_class_iou=iou,
                     mean_iou=mean, n_points=int(cm.sum()))


def segmentation_iou(pred: PointLabels, gt: PointLabels, k: int | None = None) -> SegReport:
    """Segmentation quality of one prediction/ground-truth label pairing."""
    if len(pred) != len(gt):
        raise LengthMismatch(
            f"prediction has {len(pred)} labels, ground truth {len(gt)}")
    if pred.taxonomy != gt.taxonomy:
        raise ValueError(
            f"taxonomies differ: {pred.taxonomy!r} vs {gt.taxonomy!r}")
    if k is None:
        k = len(SEG7_NAMES)
    return report_from_confusion(confusion_matrix(pred.ids, gt.ids, k))


# ------------------------------------------------------------- interchange

def save_boxes_table(frames: dict[str, list[OrientedBox]], path) -> None:
    lines = []
    for frame in sorted(frames):
        for b in frames[frame]:
            lines.append(f"{frame} {format_detection(b)}\n")
    Path(path).write_text("".join(lines))


def load_boxes_table(path) -> dict[str, list[OrientedBox]]:
    frames: dict[str, list[OrientedBox]] = {}
    for no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        frame, _, rest = line.partition(" ")
        if not rest:
            raise MalformedFile(f"{path}:{no}: expected 'frame class ...'")
        frames.setdefault(frame, []).append(parse_detection(rest, f"{path}:{no}"))
    return frames


# ------------------------------------------------------------- reports

def seg_report_text(report: SegReport, names=SEG7_NAMES) -> str:
    lines = [f"{'class':<12} {'IoU':>8}"]
    for i, name in enumerate(names):
        v = report.per_class_iou[i]
        lines.append(f"{name:<12} {'-':>8}" if math.isnan(v)
                     else f"{name:<12} {v:>8.4f}")
    lines.append(f"{'mean IoU':<12} {report.mean_iou:>8.4f}")
    return "\n".join(lines) + "\n"


def seg_report_json(report: SegReport, names=SEG7_NAMES) -> dict:
    return {
        "per_class_iou": {n: (None if math.isnan(report.per_class_iou[i]) else
                              float(report.per_class_iou[i]))
                          for i, n in enumerate(names)},
        "mean_iou": None if math.isnan(report.mean_iou) else report.mean_iou,
        "confusion": report.confusion.tolist(),
        "n_points": report.n_points,
    }


def det_report(dets, gts, cfg: EvalConfig):
    """Global and range-bucketed AP for both classes as a JSON-able dict."""
    buckets = range_bucketed_ap(dets, gts, cfg)
    out = {"iou_thresholds": {DET3_NAMES[c]: t for c, t in cfg.iou_thresholds.items()},
           "classes": {}}
    for cls in (DET_VEHICLE, DET_PEDESTRIAN):
        name = DET3_NAMES[cls]
        out["classes"][name] = {
            "ap": match_and_ap(dets, gts, cfg, cls),
            "by_range": {f"{lo:g}-{hi:g}m": ap
                         for (lo, hi), ap in buckets[cls].items()},
        }
    return out


def det_report_text(report: dict) -> str:
    lines = []
    buckets = None
    for name, block in report["classes"].items():
        buckets = list(block["by_range"])
        break
    header = f"{'class':<12} {'AP':>8}" + "".join(f" {b:>12}" for b in buckets or [])
    lines.append(header)

    def fmt(v):
        return "-" if v is None else f"{v:.4f}"

    for name, block in report["classes"].items():
        row = f"{name:<12} {fmt(block['ap']):>8}"
        row += "".join(f" {fmt(block['by_range'][b]):>12}" for b in buckets or [])
        lines.append(row)
    return "\n".join(lines) + "\n"
