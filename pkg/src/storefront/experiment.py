"""End-to-end desk-scale experiment: render streets, cluster priors, train
the detector (and optionally the postclassifier), calibrate the proposal
threshold and evaluate on held-out locations.

The CLI and the demo scripts are thin wrappers around these functions.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .evaluation import EvalReport, evaluate
from .geometry import CropPlanConfig, as_box_array, jaccard_matrix, nms
from .loss import LossConfig
from .model import (ModelParams, PostClassifierConfig, PostClassifierParams, TrainConfig, TrainingSet,
                    featurize, init_model, sgd_train, train_postclassifier)
from .pipeline import (PipelineConfig, calibrate_threshold, detect_panorama, expand_box, extract_region,
                       raw_proposals, build_training_set)
from .priors import PriorSet, cluster_priors
from .synth import Scene, assign_splits, degrade_labels, make_streets

log = logging.getLogger(__name__)

# proposals scored during calibration; the final threshold is never lower
CALIBRATION_FLOOR = 0.01


@dataclass(frozen=True)
class DataConfig:
    num_streets: int = 280
    passes: int = 1
    pass_spacing_m: float = 4.0
    test_fraction: float = 0.15
    val_fraction: float = 0.1
    seed: int = 0
    pano_width_px: int = 1664
    pano_height_px: int = 832
    keep_fraction: float = 1.0


@dataclass(frozen=True)
class PriorConfig:
    n: int = 64
    seed: int = 0
    iters: int = 100
    min_visible: float = 0.5


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 256
    grid: int = 32


@dataclass
class SceneSplits:
    train: list[tuple[str, Scene]]
    val: list[tuple[str, Scene]]
    test: list[tuple[str, Scene]]


def make_splits(cfg: DataConfig) -> SceneSplits:
    pairs = make_streets(cfg.num_streets, cfg.seed, cfg.passes, cfg.pass_spacing_m,
                         cfg.pano_width_px, cfg.pano_height_px)
    labels = assign_splits([sc for _, sc in pairs], cfg.test_fraction, cfg.val_fraction, cfg.seed)
    out = SceneSplits([], [], [])
    for pair, lab in zip(pairs, labels):
        getattr(out, lab).append(pair)
    return out


def degraded(scenes, keep_fraction: float, seed: int) -> list[Scene]:
    """Copies of ``scenes`` with training labels thinned out."""
    if keep_fraction >= 1.0:
        return list(scenes)
    out = []
    for k, sc in enumerate(scenes):
        gts = degrade_labels(sc.gts, keep_fraction, seed + k)
        out.append(Scene(sc.spec, sc.image, gts, []))
    return out


def fit_priors(training: TrainingSet, cfg: PriorConfig) -> PriorSet:
    """Cluster the crop-frame ground truth of a training set."""
    boxes = [g for g in training.gts if len(g)]
    if not boxes:
        raise ValueError("training set has no ground-truth boxes to cluster")
    return cluster_priors(np.concatenate(boxes), cfg.n, seed=cfg.seed, iters=cfg.iters,
                          source="crop-frame training ground truth")


@dataclass
class TrainedDetector:
    model: ModelParams
    priors: PriorSet
    trace: list[float]
    seconds: float


def train_detector(scenes, crop_plan: CropPlanConfig, prior_cfg: PriorConfig = PriorConfig(),
                   train_cfg: TrainConfig = TrainConfig(), loss_cfg: LossConfig = LossConfig(),
                   model_cfg: ModelConfig = ModelConfig(), priors: PriorSet | None = None,
                   threads: int = 1) -> TrainedDetector:
    t0 = time.perf_counter()
    training = build_training_set(scenes, crop_plan, model_cfg.grid, prior_cfg.min_visible, threads)
    if priors is None:
        priors = fit_priors(training, prior_cfg)
    params = init_model(priors, train_cfg.seed, model_cfg.grid, model_cfg.hidden)
    model, trace = sgd_train(params, training, train_cfg, loss_cfg, priors)
    return TrainedDetector(model, priors, trace, time.perf_counter() - t0)


def calibrate(model: ModelParams, priors: PriorSet, scenes, crop_plan: CropPlanConfig,
              pipeline_cfg: PipelineConfig) -> float:
    """Proposal threshold giving ``target_proposals_per_pano`` post-NMS
    detections per validation panorama on average."""
    low = pipeline_cfg.replace(proposal_threshold=CALIBRATION_FLOOR, postclassify=False)
    per_pano = []
    for sc in scenes:
        dets, _ = detect_panorama(model, None, sc.image, priors, low, crop_plan)
        per_pano.append([d.detector_score for d in dets])
    return calibrate_threshold(per_pano, pipeline_cfg.target_proposals_per_pano, floor=CALIBRATION_FLOOR)


def postclassifier_examples(model: ModelParams, priors: PriorSet, scenes, crop_plan: CropPlanConfig,
                            pipeline_cfg: PipelineConfig, grid: int,
                            negative_threshold: float = CALIBRATION_FLOOR,
                            negatives_cap: int = 40) -> list[tuple[np.ndarray, bool]]:
    """Featurized expanded box crops labelled storefront / not storefront.

    Positives are the ground-truth boxes plus proposals overlapping one by
    at least 0.5.  Negatives are proposals above ``negative_threshold``
    that overlap every ground-truth box by less than 0.5, thinned by NMS at
    0.5 and capped per panorama.
    """
    out = []
    frame = (-1.0, 0.0, 2.0, 1.0)

    def feat(image, box):
        eb = expand_box(box, pipeline_cfg.expansion_fraction, frame)
        return featurize(extract_region(image, eb.x_min, eb.y_min, eb.x_max, eb.y_max), grid)

    for sc in scenes:
        for g in sc.gts:
            out.append((feat(sc.image, g), True))
        props, _ = raw_proposals(model, sc.image, priors, crop_plan, negative_threshold,
                                 pipeline_cfg.edge_margin)
        props = nms(props, 0.5)
        if not props:
            continue
        g = as_box_array(sc.gts)
        if len(g):
            ov = jaccard_matrix(as_box_array([d.box for d in props]), g, wrap=True).max(axis=1)
        else:
            ov = np.zeros(len(props))
        negatives = 0
        for d, o in zip(props, ov):
            if o >= 0.5:
                out.append((feat(sc.image, d.box), True))
            elif negatives < negatives_cap:
                out.append((feat(sc.image, d.box), False))
                negatives += 1
    return out


def detect_scenes(model: ModelParams, priors: PriorSet, scenes, crop_plan: CropPlanConfig,
                  pipeline_cfg: PipelineConfig, postclassifier: PostClassifierParams | None = None,
                  threads: int = 1):
    """Detections and cost reports keyed by scene id."""
    scenes = list(scenes)

    def one(pair):
        sid, sc = pair
        return detect_panorama(model, postclassifier, sc.image, priors, pipeline_cfg, crop_plan, pano_id=sid)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, scenes))
    else:
        results = [one(p) for p in scenes]
    dets = {sid: r[0] for (sid, _), r in zip(scenes, results)}
    costs = {sid: r[1] for (sid, _), r in zip(scenes, results)}
    return dets, costs


def evaluate_scenes(model: ModelParams, priors: PriorSet, scenes, crop_plan: CropPlanConfig,
                    pipeline_cfg: PipelineConfig, postclassifier: PostClassifierParams | None = None,
                    iou: float = 0.5, budgets=(), precisions=()) -> EvalReport:
    dets, _ = detect_scenes(model, priors, scenes, crop_plan, pipeline_cfg, postclassifier)
    return evaluate(dets, {sid: sc.gts for sid, sc in scenes}, iou, budgets, precisions)


@dataclass
class ExperimentResult:
    detector: TrainedDetector
    threshold: float
    report: EvalReport
    post_report: EvalReport | None = None
    postclassifier: PostClassifierParams | None = None
    timings: dict[str, float] = field(default_factory=dict)
    num_train: int = 0
    num_test: int = 0

    @property
    def average_precision(self) -> float:
        return self.report.average_precision

    @property
    def fusion_delta(self) -> float | None:
        if self.post_report is None:
            return None
        return self.post_report.average_precision - self.report.average_precision


def run_experiment(splits: SceneSplits, crop_plan: CropPlanConfig = CropPlanConfig(),
                   prior_cfg: PriorConfig = PriorConfig(), train_cfg: TrainConfig = TrainConfig(),
                   loss_cfg: LossConfig = LossConfig(), model_cfg: ModelConfig = ModelConfig(),
                   pipeline_cfg: PipelineConfig = PipelineConfig(),
                   post_cfg: PostClassifierConfig | None = None, keep_fraction: float = 1.0,
                   eval_plan: CropPlanConfig | None = None, threads: int = 1) -> ExperimentResult:
    """Train on ``splits.train``, calibrate on ``splits.val`` and report
    held-out AP on ``splits.test``.

    With ``post_cfg`` a postclassifier is also trained and the test set is
    evaluated a second time with fused scores.
    """
    timings = {}
    train_scenes = degraded([sc for _, sc in splits.train], keep_fraction, prior_cfg.seed)
    det = train_detector(train_scenes, crop_plan, prior_cfg, train_cfg, loss_cfg, model_cfg, threads=threads)
    timings["train"] = det.seconds
    log.info("trained detector in %.1fs, final loss %.4f", det.seconds, np.mean(det.trace[-100:]))

    t0 = time.perf_counter()
    val = [sc for _, sc in splits.val] or train_scenes[: max(1, len(train_scenes) // 10)]
    threshold = calibrate(det.model, det.priors, val, crop_plan, pipeline_cfg)
    cfg = pipeline_cfg.replace(proposal_threshold=threshold, postclassify=False)
    timings["calibrate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    plan = eval_plan or crop_plan
    report = evaluate_scenes(det.model, det.priors, splits.test, plan, cfg)
    timings["evaluate"] = time.perf_counter() - t0
    result = ExperimentResult(det, threshold, report, timings=timings,
                              num_train=len(train_scenes), num_test=len(splits.test))

    if post_cfg is not None:
        t0 = time.perf_counter()
        examples = postclassifier_examples(det.model, det.priors, train_scenes, crop_plan, cfg, post_cfg.grid)
        post, _ = train_postclassifier(examples, post_cfg)
        timings["postclassifier"] = time.perf_counter() - t0
        result.postclassifier = post
        result.post_report = evaluate_scenes(det.model, det.priors, splits.test, plan,
                                             cfg.replace(postclassify=True), post)
    return result
