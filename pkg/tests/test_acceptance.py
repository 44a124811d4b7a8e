"""Acceptance suite: one test per primary criterion, each printing a
PASS/FAIL line with the measured value before asserting."""

import time

import numpy as np
import pytest

from storefront.experiment import (DataConfig, PriorConfig, evaluate_scenes, make_splits, run_experiment,
                                   train_detector)
from storefront.evaluation import average_precision, match_detections_to_gt
from storefront.geo import end_to_end_report, geo_cluster, haversine_m, locate_detection
from storefront.geometry import (CropPlanConfig, Detection, jaccard_matrix, jaccard_wrapped, nms, plan_crops,
                                sort_detections)
from storefront.loss import DetectorOutput, multibox_loss
from storefront.matching import MatchResult, max_weight_match
from storefront.model import PostClassifierConfig, TrainConfig
from storefront.pipeline import PipelineConfig, cost_report
from storefront.priors import PriorSet
from storefront.synth import Business, GeoPose, SceneSpec, moved_camera, storefront_boxes

from conftest import det, random_boxes
from test_evaluation import brute_force_ap, brute_force_labels
from test_geometry import raster_coverage
from test_loss import loss_fd_error
from test_matching import brute_force, random_instance
from test_model import end_to_end_fd_error

TIME_BUDGET_S = 600.0


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


# -- shared synthetic experiment ----------------------------------------------

@pytest.fixture(scope="session")
def experiment():
    t0 = time.perf_counter()
    splits = make_splits(DataConfig())
    result = run_experiment(splits, post_cfg=PostClassifierConfig())
    return splits, result, time.perf_counter() - t0


def scale_aps(splits, model, priors, threshold):
    pipe = PipelineConfig(proposal_threshold=threshold)
    plan = CropPlanConfig()
    return [evaluate_scenes(model, priors, splits.test, plan.first_scales(k), pipe).average_precision
            for k in (1, 3)]


# -- criteria -------------------------------------------------------------------

def test_matching_optimality(capsys):
    rng = np.random.default_rng(2024)
    instances = [random_instance(rng) for _ in range(1000)]
    t0 = time.perf_counter()
    results = [max_weight_match(np.array([b.as_tuple() for b in p]), [b.as_tuple() for b in g])
               for p, g in instances]
    elapsed = time.perf_counter() - t0
    mismatches = 0
    for (p, g), r in zip(instances, results):
        w = jaccard_matrix([b.as_tuple() for b in g], [b.as_tuple() for b in p])
        if r.total_weight != brute_force(w)[0]:
            mismatches += 1
    report(capsys, "matching optimality", mismatches == 0 and elapsed < 5.0,
           f"{mismatches} mismatches in 1000 instances, {elapsed:.2f}s")


def test_gradient_correctness(capsys):
    loss_err = loss_fd_error(100)
    chain_err = end_to_end_fd_error()
    report(capsys, "gradient correctness", loss_err <= 1e-6 and chain_err <= 1e-5,
           f"loss max rel err {loss_err:.2e} (<= 1e-6), end-to-end {chain_err:.2e} (<= 1e-5)")


def test_loss_limit(capsys):
    eps = 1e-7
    ps = PriorSet(np.array([[0.2, 0.2, 0.4, 0.4]]))
    g = np.array([[0.2, 0.2, 0.4, 0.4]])
    out = DetectorOutput.from_confidences(np.zeros((1, 4)), [1 - eps])
    val = multibox_loss(out, ps, g, MatchResult(((0, 0, 1.0),), 1.0))
    report(capsys, "loss limit", val <= 2 * eps, f"perfect-prediction loss {val:.3e} (<= {2 * eps:.0e})")


def test_crop_plan_calibration(capsys):
    W, H = 13312, 6656
    cfg = CropPlanConfig()
    crops = plan_crops(W, H, cfg)
    covered, min_overlap = True, 1.0
    for s, scale in enumerate(cfg.scales):
        mine = [c for c in crops if c.scale_index == s]
        covered &= bool(raster_coverage(mine, W, H, (scale.band_top, scale.band_bottom)))
        cols = sorted({c.x_offset for c in mine})
        rows = sorted({c.y_offset for c in mine})
        w, h = mine[0].width, mine[0].height
        if len(cols) > 1:
            min_overlap = min(min_overlap, float(np.min((w - np.diff(cols + [cols[0] + 1.0])) / w)))
        if len(rows) > 1:
            min_overlap = min(min_overlap, float(np.min((h - np.diff(rows)) / h)))
    ok = len(crops) == 87 and covered and min_overlap >= 0.2 - 1e-9
    report(capsys, "crop plan calibration", ok,
           f"{len(crops)} crops, coverage {'complete' if covered else 'incomplete'}, "
           f"min adjacent overlap {min_overlap:.3f}")


def test_nms_properties(capsys):
    rng = np.random.default_rng(77)
    violations = 0
    for _ in range(1000):
        dets = [det(b, float(rng.uniform(0.01, 1.0))) for b in random_boxes(rng, int(rng.integers(1, 15)))]
        out = nms(dets, 0.2)
        pairwise = all(jaccard_wrapped(a.box, b.box) <= 0.2 for i, a in enumerate(out) for b in out[i + 1:])
        top = max(dets, key=lambda d: (d.final_score, [-v for v in d.box.as_tuple()]))
        ok = pairwise and all(d in dets for d in out) and nms(out, 0.2) == out and out[0] == top
        violations += not ok
    report(capsys, "NMS properties", violations == 0, f"{violations} violations in 1000 random sets")


def test_ap_oracle_equivalence(capsys):
    rng = np.random.default_rng(500)
    mismatches = 0
    for _ in range(500):
        gts = random_boxes(rng, int(rng.integers(0, 11)), lo=0.1, hi=0.6, min_size=0.1)
        dets = sort_detections([det(b, float(rng.uniform()))
                                for b in random_boxes(rng, int(rng.integers(0, 11)), lo=0.1, hi=0.6, min_size=0.1)])
        labels = match_detections_to_gt(dets, [g.as_tuple() for g in gts])
        oracle = brute_force_labels(dets, gts, 0.5)
        mismatches += labels != oracle or average_precision(labels, len(gts)) != brute_force_ap(oracle, len(gts))
    report(capsys, "AP oracle equivalence", mismatches == 0, f"{mismatches} mismatches in 500 instances")


def test_cost_arithmetic(capsys):
    c = cost_report(87, 37)
    ok = c.network_evals_total == 124 and abs(c.relative_cost_vs_baseline - 124 / 4666) <= 1e-6
    report(capsys, "cost arithmetic", ok,
           f"{c.network_evals_total} evals, ratio {c.relative_cost_vs_baseline:.6f}")


def test_end_to_end_report_fixture(capsys):
    p, r = end_to_end_report(1045, 56, 495, 931)
    ok = abs(p - 0.946) <= 0.001 and abs(r - 0.532) <= 0.001
    report(capsys, "end-to-end report fixture", ok, f"precision {p:.4f}, recall {r:.4f}")


@pytest.mark.slow
def test_synthetic_end_to_end(capsys, experiment):
    splits, result, elapsed = experiment
    ap = result.average_precision
    ok = (result.num_train >= 200 and result.detector.priors.n == 64 and ap >= 0.5
          and elapsed < TIME_BUDGET_S)
    report(capsys, "synthetic end-to-end", ok,
           f"AP@0.5 {ap:.3f} on {result.num_test} held-out panoramas, trained on {result.num_train} "
           f"scenes with {result.detector.priors.n} priors, {elapsed:.0f}s total")


@pytest.mark.slow
def test_synthetic_run_deterministic(capsys, experiment):
    splits, _, _ = experiment
    scenes = [sc for _, sc in splits.train[:30]]
    cfg = TrainConfig(steps=300)
    a = train_detector(scenes, CropPlanConfig(), PriorConfig(), cfg)
    b = train_detector(scenes, CropPlanConfig(), PriorConfig(), cfg)
    same = (a.trace == b.trace and np.array_equal(a.priors.priors, b.priors.priors)
            and all(np.array_equal(x, y) for x, y in zip(a.model.arrays(), b.model.arrays())))
    pipe = PipelineConfig(proposal_threshold=0.05)
    ap_a = evaluate_scenes(a.model, a.priors, splits.test[:10], CropPlanConfig(), pipe).average_precision
    ap_b = evaluate_scenes(b.model, b.priors, splits.test[:10], CropPlanConfig(), pipe).average_precision
    report(capsys, "synthetic run determinism", same and ap_a == ap_b,
           f"repeated training bit-identical: {same}, AP {ap_a:.6f} vs {ap_b:.6f}")


@pytest.mark.slow
def test_trend_more_crops(capsys, experiment):
    splits, result, _ = experiment
    rows = [(0, *scale_aps(splits, result.detector.model, result.detector.priors, result.threshold))]
    for seed in (1, 2):
        r = run_experiment(splits, prior_cfg=PriorConfig(seed=seed), train_cfg=TrainConfig(seed=seed))
        rows.append((seed, *scale_aps(splits, r.detector.model, r.detector.priors, r.threshold)))
    ok = all(ap3 >= ap1 - 0.02 for _, ap1, ap3 in rows)
    detail = ", ".join(f"seed {s}: 1-scale {ap1:.3f} / 3-scale {ap3:.3f}" for s, ap1, ap3 in rows)
    report(capsys, "trend with crop count", ok, detail)


@pytest.mark.slow
def test_fusion_effect(capsys, experiment):
    _, result, _ = experiment
    delta = result.fusion_delta
    report(capsys, "fusion effect", delta >= -0.01,
           f"AP {result.average_precision:.3f} -> {result.post_report.average_precision:.3f} "
           f"with postclassifier (delta {delta:+.3f})")


def test_geo_dedup(capsys):
    points, truth, worst = [], [], 0.0
    stores = 0
    for s in range(5):
        base = SceneSpec(seed=s, businesses=tuple(Business(p, 2.0, 4.0, 2 * k)
                                                  for k, p in enumerate((-6.0, 0.0, 6.0))),
                         pose=GeoPose(10 + 0.01 * s, 20 + 0.01 * s, 37.0 * s % 360), facade_distance=10.0)
        stores += len(base.businesses)
        for p, off in enumerate((-1.0, 0.0, 1.0)):
            spec = moved_camera(base, off, seed=10 * s + p)
            for box, k in zip(*storefront_boxes(spec)):
                g = locate_detection(spec.pose, Detection(box, 1.0, None, "", f"s{s}p{p}"))
                worst = max(worst, haversine_m(g.lat, g.lng, *spec.facade_latlng(spec.businesses[k].position)))
                points.append(g)
                truth.append((s, k))
    clusters = geo_cluster(points, 5.0)
    label = {id(p): t for p, t in zip(points, truth)}
    pure = all(len({label[id(m)] for m in c.members}) == 1 for c in clusters)
    covered = {label[id(c.members[0])] for c in clusters}
    ok = worst < 2.5 and len(points) == 3 * stores and pure and len(clusters) == stores == len(covered)
    report(capsys, "geo dedup", ok,
           f"{len(points)} detections of {stores} storefronts -> {len(clusters)} clusters, "
           f"max localization error {worst:.2f} m")
