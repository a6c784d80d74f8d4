"""Command-line entry point.

Commands: segment, detect, eval-seg, eval-det, bench, viz. Batch commands
process scan directories with a bounded worker pool and write outputs
atomically (temp + rename). Exit codes: 0 success, 1 any per-file
failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import _kernels as kernels
from . import metrics, network, postprocess, synthetic, viz
from .errors import ConfigError, MVLidarError, MissingPair
from .metrics import EvalConfig
from .nn.blob import load_blob
from .pipeline import (DEFAULT_CONFIG_TEXT, PipelineConfig,
                       load_pipeline_config, run_pipeline)
from .pointcloud import (DEFAULT_CLASS_MAP, TAXONOMY_SEG7, PointLabels,
                         load_class_map, load_kitti_bin,
                         load_semantickitti_labels, remap_labels, save_labels)
from .projection import (bev_rasterize, knn_smooth, reproject_semantics,
                         spherical_project, unproject_labels)

log = logging.getLogger("mvlidar")


def _atomic_write(path: Path, write_fn) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    write_fn(tmp)
    os.replace(tmp, path)


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} does not exist: {p}")
    return p


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        cfg = load_pipeline_config(_require(args.config, "config file"))
    else:
        cfg = PipelineConfig()
    if getattr(args, "knn", False):
        cfg = replace(cfg, knn=replace(cfg.knn, enabled=True))
    if getattr(args, "threshold", None) is not None:
        cfg = replace(cfg, cluster=replace(cfg.cluster,
                                           confidence_threshold=args.threshold))
    return cfg


def _stage1_graph(args, cfg: PipelineConfig):
    shape = (3, cfg.range_cfg.n_rows, cfg.range_cfg.n_cols)
    if args.random_weights:
        store = network.random_stage1_store(seed=args.seed, input_shape=shape)
    else:
        path = args.weights1 or cfg.weights_stage1
        if not path:
            raise ConfigError("stage-1 weights required: pass --weights1, set "
                              "weights.stage1 in the config, or use --random-weights")
        store = load_blob(_require(path, "stage-1 weight blob"))
    return network.build_stage1(store, input_shape=shape)


def _stage2_graph(args, cfg: PipelineConfig):
    shapes = {"semantics": (7, cfg.bev_cfg.width_cells, cfg.bev_cfg.length_cells),
              "height": (3, cfg.bev_cfg.width_cells, cfg.bev_cfg.length_cells)}
    if args.random_weights:
        store = network.random_stage2_store(seed=args.seed + 1,
                                            input_shapes=shapes)
    else:
        path = args.weights2 or cfg.weights_stage2
        if not path:
            raise ConfigError("stage-2 weights required: pass --weights2, set "
                              "weights.stage2 in the config, or use --random-weights")
        store = load_blob(_require(path, "stage-2 weight blob"))
    return network.build_stage2(store, input_shapes=shapes)


def _scan_batch(args, out_dir: Path, worker):
    """Run `worker(scan_path)` over every .bin in the input dir; returns
    (n_processed, n_failed)."""
    in_dir = _require(args.input, "input directory")
    out_dir.mkdir(parents=True, exist_ok=True)
    scans = sorted(in_dir.glob("*.bin"))
    failed = 0
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        for scan, err in zip(scans, pool.map(worker, scans)):
            if err is not None:
                failed += 1
                log.error("%s: %s", scan.name, err)
    return len(scans), failed


def cmd_segment(args) -> int:
    cfg = _load_config(args)
    graph = _stage1_graph(args, cfg)

    def worker(scan: Path):
        try:
            cloud = load_kitti_bin(scan)
            img = spherical_project(cloud, cfg.range_cfg)
            probs = network.infer_stage1(graph, img)
            labels = unproject_labels(probs, img, cloud)
            _atomic_write(Path(args.out) / (scan.stem + ".label"),
                          lambda p: save_labels(labels, p))
            if args.knn:
                smoothed = knn_smooth(labels, cloud, img, cfg.knn.k,
                                      cfg.knn.window, cfg.knn.cutoff)
                _atomic_write(Path(args.out) / (scan.stem + ".knn.label"),
                              lambda p: save_labels(smoothed, p))
            return None
        except Exception as exc:  # keep the batch going
            return exc

    n, failed = _scan_batch(args, Path(args.out), worker)
    print(f"segment: {n - failed}/{n} scans processed, {failed} failed")
    return 1 if failed else 0


def cmd_detect(args) -> int:
    cfg = _load_config(args)
    stage1 = _stage1_graph(args, cfg)
    stage2 = _stage2_graph(args, cfg)

    def worker(scan: Path):
        try:
            cloud = load_kitti_bin(scan)
            out = run_pipeline(cloud, stage1, stage2, cfg)
            base = Path(args.out) / scan.stem
            _atomic_write(base.with_suffix(".txt"),
                          lambda p: postprocess.save_detections_txt(out.detections, p))
            _atomic_write(base.with_suffix(".json"),
                          lambda p: postprocess.save_detections_json(out.detections, p))
            _atomic_write(base.with_name(base.name + ".drivable.ppm"),
                          lambda p: viz.write_ppm(viz.render_mask(out.drivable_mask), p))
            img = viz.render_bev(out.detections, cfg.bev_cfg,
                                 drivable=out.drivable_mask,
                                 occupancy=out.bev_grid.occupancy)
            _atomic_write(base.with_name(base.name + ".bev.ppm"),
                          lambda p: viz.write_ppm(img, p))
            return None
        except Exception as exc:
            return exc

    n, failed = _scan_batch(args, Path(args.out), worker)
    print(f"detect: {n - failed}/{n} scans processed, {failed} failed")
    return 1 if failed else 0


def _load_label_file(path: Path) -> PointLabels:
    count = path.stat().st_size // 4
    return load_semantickitti_labels(path, count)


def cmd_eval_seg(args) -> int:
    pred_dir = _require(args.pred, "prediction directory")
    gt_dir = _require(args.gt, "ground-truth directory")
    preds = sorted(pred_dir.glob("*.label"))
    if not preds:
        raise MissingPair(f"no .label files under {pred_dir}")
    table = load_class_map(_require(args.classmap, "class map")) \
        if args.classmap else DEFAULT_CLASS_MAP

    total = None
    for pred_path in preds:
        gt_path = gt_dir / pred_path.name
        if not gt_path.exists():
            raise MissingPair(f"{pred_path.name}: no ground-truth counterpart")
        pred = _load_label_file(pred_path)
        gt = _load_label_file(gt_path)
        pred = PointLabels.from_array(pred.ids, TAXONOMY_SEG7) \
            if not args.remap_pred else remap_labels(pred, table)
        gt = remap_labels(gt, table) if args.remap_gt \
            else PointLabels.from_array(gt.ids, TAXONOMY_SEG7)
        report = metrics.segmentation_iou(pred, gt)
        total = report.confusion if total is None else total + report.confusion
    report = metrics.report_from_confusion(total)
    text = metrics.seg_report_text(report)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "seg_report.txt", lambda p: p.write_text(text))
        _atomic_write(out / "seg_report.json", lambda p: p.write_text(
            json.dumps(metrics.seg_report_json(report), indent=1)))
    return 0


def _load_det_frames(path: Path) -> dict[str, list]:
    if path.is_dir():
        return {f.stem: postprocess.load_detections_txt(f)
                for f in sorted(path.glob("*.txt"))}
    return metrics.load_boxes_table(path)


def cmd_eval_det(args) -> int:
    pred = _load_det_frames(_require(args.pred, "predictions"))
    gt = _load_det_frames(_require(args.gt, "ground truth"))
    if not set(pred) & set(gt) and (pred or gt):
        raise MissingPair("prediction and ground-truth frames do not overlap")
    missing = sorted(set(pred) - set(gt))
    if missing:
        raise MissingPair(f"predictions without ground truth: {', '.join(missing)}")
    cfg = EvalConfig(ap_points=args.ap_points)
    report = metrics.det_report(pred, gt, cfg)
    text = metrics.det_report_text(report)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "det_report.txt", lambda p: p.write_text(text))
        _atomic_write(out / "det_report.json",
                      lambda p: p.write_text(json.dumps(report, indent=1)))
    return 0


def _stats(samples: list[float]) -> dict:
    out = {"n": len(samples), "median_ms": statistics.median(samples) * 1e3,
           "min_ms": min(samples) * 1e3, "max_ms": max(samples) * 1e3}
    if len(samples) >= 2:
        idx = max(0, int(round(0.95 * (len(samples) - 1))))
        out["p95_ms"] = sorted(samples)[idx] * 1e3
    else:
        out["p95_ms"] = None
    return out


def _bench_once(args, cfg: PipelineConfig) -> dict:
    """One benchmark pass on the current kernel backend."""
    cloud = synthetic.make_cloud(args.points, seed=args.seed,
                                 extent=cfg.bev_cfg.extent)
    scale = max(1, args.nn_scale)
    rows, cols = cfg.range_cfg.n_rows, cfg.range_cfg.n_cols
    nn1_shape = (3, max(8, rows // scale), max(64, cols // scale))
    bev_n = max(64, cfg.bev_cfg.width_cells // scale)
    nn2_shapes = {"semantics": (7, bev_n, bev_n), "height": (3, bev_n, bev_n)}
    stage1 = network.build_stage1(
        network.random_stage1_store(args.seed, nn1_shape), nn1_shape)
    stage2 = network.build_stage2(
        network.random_stage2_store(args.seed + 1, nn2_shapes), nn2_shapes)

    rng = np.random.default_rng(args.seed)
    fixture_boxes = []
    for i in range(20):
        fixture_boxes.append(postprocess.OrientedBox(
            cx=float(rng.uniform(-30, 30)), cy=float(rng.uniform(-30, 30)),
            width=1.8, length=4.2, yaw=float(rng.uniform(-3, 3)),
            cls=0, confidence=0.9))
    class_grid, box_grid = synthetic.make_detection_grids(fixture_boxes,
                                                          cfg.bev_cfg)

    stage_samples: dict[str, list[float]] = {}
    e2e: list[float] = []
    uniform = np.full((7, rows, cols), 1.0 / 7.0, np.float32)
    nn1_input = np.zeros(nn1_shape, np.float32)
    nn2_input = (np.zeros(nn2_shapes["semantics"], np.float32),
                 np.zeros(nn2_shapes["height"], np.float32))

    def timed(name, fn):
        t0 = time.perf_counter()
        result = fn()
        dt = time.perf_counter() - t0
        stage_samples.setdefault(name, []).append(dt)
        return result, dt

    reps = max(1, args.reps)
    for rep in range(reps + 1):  # first rep is warmup
        total = 0.0
        img, dt = timed("spherical_project",
                        lambda: spherical_project(cloud, cfg.range_cfg))
        total += dt
        _, dt = timed("bev_rasterize", lambda: bev_rasterize(cloud, cfg.bev_cfg))
        total += dt
        _, dt = timed("reproject_semantics",
                      lambda: reproject_semantics(uniform, img, cloud, cfg.bev_cfg))
        total += dt
        _, dt = timed("postprocess",
                      lambda: postprocess.extract_detections(
                          class_grid, box_grid, cfg.bev_cfg, cfg.cluster))
        total += dt
        if not args.no_nn:
            _, dt = timed("stage1_nn", lambda: network.infer_stage1(stage1, nn1_input))
            total += dt
            _, dt = timed("stage2_nn", lambda: network.infer_stage2(stage2, nn2_input))
            total += dt
        e2e.append(total)
        if rep == 0:  # drop warmup samples
            stage_samples = {}
            e2e = []

    non_nn = [a + b + c for a, b, c in zip(stage_samples["spherical_project"],
                                           stage_samples["bev_rasterize"],
                                           stage_samples["postprocess"])]
    report = {
        "backend": kernels.current_backend(),
        "points": args.points,
        "reps": reps,
        "nn_resolution": {"stage1": list(nn1_shape),
                          "stage2": [list(s) for s in nn2_shapes.values()]}
        if not args.no_nn else None,
        "stages": {k: _stats(v) for k, v in stage_samples.items()},
        "non_nn_pipeline": _stats(non_nn),
        "end_to_end": _stats(e2e),
    }
    return report


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    if args.compare_backends:
        report = {"backends": {}}
        for backend in kernels.available_backends():
            with kernels.backend(backend):
                report["backends"][backend] = _bench_once(args, cfg)
    else:
        report = _bench_once(args, cfg)
    text = json.dumps(report, indent=1)
    if args.out:
        out = Path(args.out)
        if out.suffix == ".json":
            out.parent.mkdir(parents=True, exist_ok=True)
            _atomic_write(out, lambda p: p.write_text(text))
        else:
            out.mkdir(parents=True, exist_ok=True)
            _atomic_write(out / "bench.json", lambda p: p.write_text(text))
    print(text)
    return 0


def cmd_viz(args) -> int:
    cfg = _load_config(args)
    in_dir = _require(args.input, "detection directory")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(in_dir.glob("*.txt")) + sorted(
        f for f in in_dir.glob("*.json") if not (in_dir / (f.stem + ".txt")).exists())
    failed = 0
    for f in files:
        try:
            boxes = (postprocess.load_detections_txt(f) if f.suffix == ".txt"
                     else postprocess.load_detections_json(f))
            img = viz.render_bev(boxes, cfg.bev_cfg)
            _atomic_write(out_dir / (f.stem + ".ppm"),
                          lambda p: viz.write_ppm(img, p))
        except Exception as exc:
            failed += 1
            log.error("%s: %s", f.name, exc)
    print(f"viz: {len(files) - failed}/{len(files)} rendered, {failed} failed")
    return 1 if failed else 0


def cmd_init_config(args) -> int:
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(DEFAULT_CONFIG_TEXT)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvlidar",
        description="Two-stage multi-view LiDAR perception pipeline")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, weights1=False, weights2=False):
        p.add_argument("--config", help="pipeline config file")
        p.add_argument("--seed", type=int, default=0,
                       help="seed for any randomized fixture generation")
        if weights1:
            p.add_argument("--weights1", help="stage-1 weight blob")
            p.add_argument("--random-weights", action="store_true",
                           help="use seeded random weights instead of blobs")
        if weights2:
            p.add_argument("--weights2", help="stage-2 weight blob")

    p = sub.add_parser("segment", help="per-scan semantic point labels")
    p.add_argument("input", help="directory of .bin scans")
    common(p, weights1=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--knn", action="store_true",
                   help="also write the kNN-smoothed variant (.knn.label)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("detect", help="per-scan detections + drivable space")
    p.add_argument("input", help="directory of .bin scans")
    common(p, weights1=True, weights2=True)
    p.add_argument("--out", required=True)
    p.add_argument("--knn", action="store_true")
    p.add_argument("--threshold", type=float,
                   help="override detection confidence threshold")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("eval-seg", help="mIoU of predicted vs ground-truth labels")
    p.add_argument("pred", help="directory of predicted .label files")
    p.add_argument("gt", help="directory of ground-truth .label files")
    p.add_argument("--remap-gt", action="store_true",
                   help="ground truth is raw ids; remap onto the 7 classes")
    p.add_argument("--remap-pred", action="store_true")
    p.add_argument("--classmap", help="class-map config overriding the default")
    p.add_argument("--out", help="directory for report files")
    p.set_defaults(fn=cmd_eval_seg)

    p = sub.add_parser("eval-det", help="AP of predicted vs ground-truth boxes")
    p.add_argument("pred", help="detection dir (*.txt) or frame table file")
    p.add_argument("gt", help="ground-truth dir or frame table file")
    p.add_argument("--ap-points", type=int, default=40,
                   help="recall interpolation points (40 or 11)")
    p.add_argument("--out", help="directory for report files")
    p.set_defaults(fn=cmd_eval_det)

    p = sub.add_parser("bench", help="throughput statistics as JSON")
    common(p, weights1=True, weights2=True)
    p.add_argument("--points", type=int, default=120_000)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--nn-scale", type=int, default=8,
                   help="divide NN resolutions by this factor")
    p.add_argument("--no-nn", action="store_true",
                   help="benchmark only the non-NN pipeline stages")
    p.add_argument("--compare-backends", action="store_true",
                   help="run once per available kernel backend")
    p.add_argument("--out", help="JSON file or directory")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("viz", help="render detection files to BEV images")
    p.add_argument("input", help="directory of detection .txt/.json files")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("init-config", help="write a default pipeline config")
    p.add_argument("--out", default="mvlidar.cfg")
    p.set_defaults(fn=cmd_init_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except MVLidarError as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
