"""``storefront`` command line: dataset generation, priors, training,
detection, evaluation, geo-clustering and the crop-count benchmark.

Every command reads one JSON run config (``--config``, defaults built in)
plus ``--set section.key=value`` overrides and writes under ``--out``.
Exit status is 0 on success, 1 for invalid configuration or inputs and 2
for failures while running; errors are also reported as one JSON object on
stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import experiment as ex
from .config import ConfigError, RunConfig, load_config
from .evaluation import evaluate, match_detections_to_gt
from .geo import end_to_end_report, geo_cluster, locate_detection, write_clusters
from .geometry import (as_box_array, jaccard_matrix, read_detections, sort_detections, split_at_seam,
                       write_detections)
from .model import (CheckpointError, load_checkpoint, load_postclassifier, save_checkpoint,
                    save_postclassifier, train_postclassifier)
from .priors import PriorSet
from .synth import generate_dataset, load_manifest, load_split

log = logging.getLogger("storefront")

COMMANDS = ("gen-data", "make-priors", "train", "detect", "eval", "geocluster", "bench", "show-config")


class InputError(ValueError):
    """A required input file or directory is missing or malformed."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


class Paths:
    def __init__(self, cfg: RunConfig, out: Path):
        p = cfg.paths
        self.out = out
        self.data = Path(p.data_dir) if p.data_dir else out / "data"
        self.priors = Path(p.priors) if p.priors else out / "priors.json"
        self.model = Path(p.model_dir) if p.model_dir else out / "model"
        self.detections = Path(p.detections_dir) if p.detections_dir else out / "detections"

    @property
    def checkpoint(self) -> Path:
        return self.model / "detector.ckpt"

    @property
    def postclassifier(self) -> Path:
        return self.model / "postclassifier.ckpt"

    @property
    def threshold(self) -> Path:
        return self.model / "threshold.json"

    @property
    def detections_file(self) -> Path:
        return self.detections / "detections.jsonl"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise InputError(f"{what} not found: {path}")
    return path


def _split(paths: Paths, name: str):
    _require(paths.data / "manifest.json", "dataset manifest")
    scenes = load_split(paths.data, name)
    if not scenes:
        raise InputError(f"dataset has no '{name}' scenes")
    return scenes


def _priors(paths: Paths) -> PriorSet:
    _require(paths.priors, "prior set")
    try:
        return PriorSet.load(paths.priors)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"invalid prior set {paths.priors}: {exc}") from exc


def _pipeline(cfg: RunConfig, paths: Paths):
    pipe = cfg.pipeline
    if cfg.detect.use_calibrated_threshold and paths.threshold.exists():
        t = json.loads(paths.threshold.read_text())["proposal_threshold"]
        pipe = pipe.replace(proposal_threshold=t)
    return pipe


def _models(cfg: RunConfig, paths: Paths):
    priors = _priors(paths)
    model = load_checkpoint(_require(paths.checkpoint, "detector checkpoint"), priors)
    post = None
    if cfg.pipeline.postclassify:
        post = load_postclassifier(_require(paths.postclassifier, "postclassifier checkpoint"))
    return priors, model, post


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, paths: Paths, threads: int) -> dict:
    d = cfg.data
    manifest = generate_dataset(paths.data, d.num_streets, d.seed, d.passes, d.pass_spacing_m,
                                d.test_fraction, d.val_fraction, d.pano_width_px, d.pano_height_px)
    counts = {k: sum(1 for v in manifest["split"].values() if v == k) for k in ("train", "val", "test")}
    return {"data_dir": str(paths.data), "scenes": len(manifest["ids"]), "split": counts}


def cmd_make_priors(cfg: RunConfig, paths: Paths, threads: int) -> dict:
    scenes = ex.degraded([sc for _, sc in _split(paths, "train")], cfg.data.keep_fraction, cfg.priors.seed)
    training = ex.build_training_set(scenes, cfg.crop_plan, cfg.model.grid, cfg.priors.min_visible, threads)
    priors = ex.fit_priors(training, cfg.priors)
    paths.priors.parent.mkdir(parents=True, exist_ok=True)
    priors.save(paths.priors)
    return {"priors": str(paths.priors), "n": priors.n, "hash": priors.content_hash()}


def cmd_train(cfg: RunConfig, paths: Paths, threads: int) -> dict:
    priors = _priors(paths)
    train = ex.degraded([sc for _, sc in _split(paths, "train")], cfg.data.keep_fraction, cfg.priors.seed)
    det = ex.train_detector(train, cfg.crop_plan, cfg.priors, cfg.train, cfg.loss, cfg.model,
                            priors=priors, threads=threads)
    paths.model.mkdir(parents=True, exist_ok=True)
    save_checkpoint(paths.checkpoint, det.model)
    with open(paths.model / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for k, v in enumerate(det.trace):
            w.writerow([k, f"{v:.9f}"])
    manifest = load_manifest(paths.data)
    val = [sc for _, sc in load_split(paths.data, "val")] if "val" in manifest["split"].values() else []
    val = val or train[: max(1, len(train) // 10)]
    threshold = ex.calibrate(det.model, priors, val, cfg.crop_plan, cfg.pipeline)
    _write_json(paths.threshold, {"proposal_threshold": threshold,
                                  "target_proposals_per_pano": cfg.pipeline.target_proposals_per_pano,
                                  "validation_panoramas": len(val)})
    out = {"checkpoint": str(paths.checkpoint), "steps": len(det.trace),
           "final_loss": float(np.mean(det.trace[-min(100, len(det.trace)):])),
           "proposal_threshold": threshold}
    if cfg.pipeline.postclassify:
        pipe = cfg.pipeline.replace(proposal_threshold=threshold)
        examples = ex.postclassifier_examples(det.model, priors, train, cfg.crop_plan, pipe,
                                              cfg.postclassifier.grid)
        post, _ = train_postclassifier(examples, cfg.postclassifier)
        save_postclassifier(paths.postclassifier, post)
        out["postclassifier"] = str(paths.postclassifier)
    return out


def _overlay(image: np.ndarray, dets, path: Path) -> None:
    H, W = image.shape[:2]
    im = Image.fromarray(image)
    draw = ImageDraw.Draw(im)
    for d in dets:
        for part in split_at_seam(d.box):
            draw.rectangle([part.x_min * W, part.y_min * H, part.x_max * W - 1, part.y_max * H - 1],
                           outline=(255, 0, 255), width=2)
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PPM")


def cmd_detect(cfg: RunConfig, paths: Paths, threads: int) -> dict:
    priors, model, post = _models(cfg, paths)
    scenes = _split(paths, "test")
    pipe = _pipeline(cfg, paths)
    dets, costs = ex.detect_scenes(model, priors, scenes, cfg.crop_plan, pipe, post, threads=threads)
    paths.detections.mkdir(parents=True, exist_ok=True)
    write_detections(paths.detections_file, [d for sid, _ in scenes for d in dets[sid]])
    per_pano = {sid: c.to_dict() for sid, c in costs.items()}
    mean = {k: float(np.mean([c[k] for c in per_pano.values()])) for k in next(iter(per_pano.values()))}
    _write_json(paths.detections / "cost_report.json",
                {"per_panorama": per_pano, "mean": mean, "proposal_threshold": pipe.proposal_threshold})
    if cfg.detect.overlay:
        for sid, sc in scenes:
            _overlay(sc.image, dets[sid], paths.detections / "overlays" / f"{sid}.ppm")
    return {"detections": str(paths.detections_file), "panoramas": len(scenes),
            "detections_total": sum(len(v) for v in dets.values()), "mean_cost": mean}


def _detections_by_pano(paths: Paths, scene_ids) -> dict:
    _require(paths.detections_file, "detections")
    by = {sid: [] for sid in scene_ids}
    for d in read_detections(paths.detections_file):
        if d.pano_id not in by:
            raise InputError(f"detection for unknown panorama {d.pano_id!r}")
        by[d.pano_id].append(d)
    return by


def cmd_eval(cfg: RunConfig, paths: Paths, threads: int) -> dict:
    scenes = _split(paths, "test")
    dets = _detections_by_pano(paths, [sid for sid, _ in scenes])
    e = cfg.eval
    report = evaluate(dets, {sid: sc.gts for sid, sc in scenes}, e.iou, e.budgets, e.precisions)
    out_dir = paths.out / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_json(out_dir / "eval_report.json")
    report.write_pr_csv(out_dir / "pr_curve.csv")
    return {"average_precision": report.average_precision, "counts": report.counts,
            "report": str(out_dir / "eval_report.json")}


def cmd_geocluster(cfg: RunConfig, paths: Paths, threads: int) -> dict:
    scenes = _split(paths, "test")
    dets = _detections_by_pano(paths, [sid for sid, _ in scenes])
    points, false_pos, found = [], 0, set()
    true_businesses = set()
    for sid, sc in scenes:
        street = sid.split("p")[0]
        true_businesses.update((street, b) for b in sc.business_index)
        ordered = sort_detections(dets[sid])
        labels = match_detections_to_gt(ordered, sc.gts, cfg.eval.iou)
        for d, ok in zip(ordered, labels):
            points.append(locate_detection(sc.pose, d, facade_range=cfg.geo.facade_range_m))
            if not ok:
                false_pos += 1
        # which businesses the true positives hit
        claimed = _claimed_gts(ordered, labels, sc.gts, cfg.eval.iou)
        found.update((street, sc.business_index[j]) for j in claimed)
    clusters = geo_cluster(points, cfg.geo.epsilon_m)
    out_dir = paths.out / "geo"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_clusters(out_dir / "clusters.json", clusters)
    report = {"detections_confirmed": len(points), "false_positives": false_pos,
              "unique_businesses_found": len(found), "true_businesses": len(true_businesses),
              "clusters": len(clusters)}
    if points and true_businesses:
        precision, recall = end_to_end_report(len(points), false_pos, len(found), len(true_businesses))
        report.update(precision=precision, recall=recall)
    _write_json(out_dir / "end_to_end_report.json", report)
    return report


def _claimed_gts(dets, labels, gts, iou) -> list[int]:
    """Indices of the ground-truth boxes claimed by true positives, using the
    same greedy rule as the evaluator."""
    g = as_box_array(gts)
    if not dets or len(g) == 0:
        return []
    ov = jaccard_matrix(as_box_array([d.box for d in dets]), g, wrap=True)
    claimed = np.zeros(len(g), dtype=bool)
    for k, ok in enumerate(labels):
        row = np.where(claimed, -1.0, ov[k])
        j = int(np.argmax(row))
        if ok:
            claimed[j] = True
    return [int(j) for j in np.flatnonzero(claimed)]


def cmd_bench(cfg: RunConfig, paths: Paths, threads: int) -> dict:
    priors, model, post = _models(cfg, paths)
    scenes = _split(paths, "test")
    pipe = _pipeline(cfg, paths)
    gts = {sid: sc.gts for sid, sc in scenes}
    rows = []
    for k in cfg.bench.scales:
        if not 1 <= k <= len(cfg.crop_plan.scales):
            raise ConfigError(f"bench scale count {k} outside 1..{len(cfg.crop_plan.scales)}")
        plan = cfg.crop_plan.first_scales(k)
        dets, costs = ex.detect_scenes(model, priors, scenes, plan, pipe, post, threads=threads)
        ap = evaluate(dets, gts, cfg.eval.iou).average_precision
        rows.append({
            "crops": int(np.mean([c.crops_evaluated for c in costs.values()])),
            "proposals": float(np.mean([len(v) for v in dets.values()])),
            "AP": ap,
            "evals_per_pano": float(np.mean([c.network_evals_total for c in costs.values()])),
        })
    paths.out.mkdir(parents=True, exist_ok=True)
    with open(paths.out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["crops", "proposals", "AP", "evals_per_pano"])
        for r in rows:
            w.writerow([r["crops"], f"{r['proposals']:.6f}", f"{r['AP']:.6f}", f"{r['evals_per_pano']:.6f}"])
    return {"bench": str(paths.out / "bench.csv"), "rows": rows}


def cmd_show_config(cfg: RunConfig, paths: Paths, threads: int) -> dict:
    return cfg.to_dict()


HANDLERS = {
    "gen-data": cmd_gen_data, "make-priors": cmd_make_priors, "train": cmd_train,
    "detect": cmd_detect, "eval": cmd_eval, "geocluster": cmd_geocluster, "bench": cmd_bench,
    "show-config": cmd_show_config,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="storefront", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS, help="step to run")
    parser.add_argument("--config", metavar="PATH", help="run config JSON (default: built-in defaults)")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                        help="override a config value, e.g. train.steps=500 (repeatable)")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for parallel phases (default: number of processors)")
    parser.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        return _fail(1, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    paths = Paths(cfg, Path(args.out))
    try:
        summary = HANDLERS[args.command](cfg, paths, args.threads)
    except (ConfigError, InputError, CheckpointError) as exc:
        return _fail(1, exc)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("command failed", exc_info=True)
        return _fail(2, exc)
    sys.stdout.write(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
