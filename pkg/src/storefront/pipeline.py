"""Multi-crop panorama inference with edge filtering, NMS and optional
postclassification, plus evaluation-cost accounting."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import (Box, CropPlanConfig, CropSpec, Detection, as_box_array, crop_to_pano_array,
                       edge_filter_mask, jaccard_matrix, jaccard_wrapped, nms, plan_crops, sort_detections)
from .loss import sigmoid
from .model import (CheckpointError, ModelParams, PostClassifierParams, TrainingSet, featurize,
                    forward_features, postclassify_features)
from .priors import PriorSet

# proposals per panorama of the saliency-based baseline the cost is compared to
BASELINE_PROPOSALS_PER_PANO = 4666


@dataclass(frozen=True)
class PipelineConfig:
    proposal_threshold: float = 0.5
    nms_threshold: float = 0.2
    target_proposals_per_pano: int = 37
    expansion_fraction: float = 0.166
    postclassify: bool = False
    edge_margin: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.proposal_threshold < 1.0:
            raise ValueError("proposal_threshold must lie in (0, 1)")
        if not 0.0 <= self.nms_threshold < 1.0:
            raise ValueError("nms_threshold must lie in [0, 1)")
        if self.expansion_fraction < 0:
            raise ValueError("expansion_fraction must be non-negative")
        if self.target_proposals_per_pano <= 0:
            raise ValueError("target_proposals_per_pano must be positive")

    def replace(self, **kw) -> "PipelineConfig":
        d = dict(self.__dict__)
        d.update(kw)
        return PipelineConfig(**d)


@dataclass(frozen=True)
class CostReport:
    crops_evaluated: int
    proposals_postclassified: int
    network_evals_total: int
    relative_cost_vs_baseline: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cost_report(crops: int, proposals_postclassified: int,
                baseline: int = BASELINE_PROPOSALS_PER_PANO) -> CostReport:
    total = crops + proposals_postclassified
    return CostReport(crops, proposals_postclassified, total, total / baseline)


def fuse_scores(detector_score: float, post_score: float) -> float:
    for s in (detector_score, post_score):
        if not 0.0 < s <= 1.0:
            raise ValueError(f"score {s} outside (0, 1]")
    return detector_score * post_score


def marginal_probability(det: Detection, overlapping) -> float:
    """Sum of ``S_p(det) * S_d(b_i)`` over detections ``b_i`` overlapping
    ``det`` by at least 0.5, capped at 1."""
    overlapping = list(overlapping)
    if not overlapping:
        return 0.0
    if det.post_score is None:
        raise ValueError("marginal_probability needs a postclassifier score on det")
    for other in overlapping:
        if jaccard_wrapped(det.box, other.box) < 0.5 - 1e-12:
            raise ValueError("overlapping set contains a detection with Jaccard < 0.5")
    return min(1.0, sum(det.post_score * o.detector_score for o in overlapping))


def expand_box(box: Box, fraction: float, frame_limits=(0.0, 0.0, 1.0, 1.0)) -> Box:
    """Scale width and height by ``1 + fraction`` about the centre, then clamp."""
    cx, cy = box.center
    hw = 0.5 * box.width * (1.0 + fraction)
    hh = 0.5 * box.height * (1.0 + fraction)
    x0, y0, x1, y1 = frame_limits
    return Box(max(cx - hw, x0), max(cy - hh, y0), min(cx + hw, x1), min(cy + hh, y1))


# ---------------------------------------------------------------------------
# pixel access


def _pixel_range(offset: float, size: float, total: int) -> tuple[int, int]:
    start = int(math.floor(offset * total + 0.5))
    stop = int(math.floor((offset + size) * total + 0.5))
    return start, max(stop, start + 1)


def extract_region(image: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    """Pixels of a panorama-frame rectangle; x wraps around the seam."""
    H, W = image.shape[:2]
    c0, c1 = _pixel_range(x0, x1 - x0, W)
    r0, r1 = _pixel_range(y0, y1 - y0, H)
    r0, r1 = max(r0, 0), min(max(r1, r0 + 1), H)
    rows = image[r0:r1]
    if 0 <= c0 and c1 <= W:
        return rows[:, c0:c1]
    return rows[:, np.arange(c0, c1) % W]


def extract_crop(image: np.ndarray, crop: CropSpec) -> np.ndarray:
    return extract_region(image, crop.x_offset, crop.y_offset,
                          crop.x_offset + crop.width, crop.y_offset + crop.height)


def crop_features(image: np.ndarray, crops, grid: int) -> np.ndarray:
    return np.array([featurize(extract_crop(image, c), grid) for c in crops])


def crop_ground_truth(gts, crop: CropSpec, min_visible: float = 0.5) -> np.ndarray:
    """Panorama ground truth mapped into ``crop``'s frame and clipped to it.

    Boxes with less than ``min_visible`` of their area inside the crop are
    dropped.
    """
    g = as_box_array(gts)
    out = []
    for b in g:
        best = None
        for dx in (0.0, 1.0, -1.0):
            x0 = (b[0] + dx - crop.x_offset) / crop.width
            x1 = (b[2] + dx - crop.x_offset) / crop.width
            y0 = (b[1] - crop.y_offset) / crop.height
            y1 = (b[3] - crop.y_offset) / crop.height
            cx0, cy0, cx1, cy1 = max(x0, 0.0), max(y0, 0.0), min(x1, 1.0), min(y1, 1.0)
            if cx1 <= cx0 or cy1 <= cy0:
                continue
            frac = (cx1 - cx0) * (cy1 - cy0) / ((x1 - x0) * (y1 - y0))
            if best is None or frac > best[0]:
                best = (frac, (cx0, cy0, cx1, cy1))
        if best is not None and best[0] >= min_visible:
            out.append(best[1])
    return np.array(out, dtype=np.float64).reshape(-1, 4)


def build_training_set(scenes, crop_plan: CropPlanConfig, grid: int = 32, min_visible: float = 0.5,
                       threads: int = 1) -> TrainingSet:
    """One example per (scene, crop) with clipped crop-frame ground truth."""
    def one(scene):
        H, W = scene.image.shape[:2]
        crops = plan_crops(W, H, crop_plan)
        feats = crop_features(scene.image, crops, grid)
        return feats, [crop_ground_truth(scene.gts, c, min_visible) for c in crops]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, scenes))
    else:
        parts = [one(s) for s in scenes]
    feats = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, grid * grid))
    gts = [g for p in parts for g in p[1]]
    return TrainingSet(feats, gts, list(range(len(gts))))


# ---------------------------------------------------------------------------
# detection


def raw_proposals(model: ModelParams, image: np.ndarray, priors: PriorSet, crop_plan: CropPlanConfig,
                  threshold: float, edge_margin: float = 0.1, pano_id: str = "") -> tuple[list[Detection], int]:
    """Thresholded, edge-filtered proposals of every crop in panorama frame.

    Returns the proposals (before NMS) and the number of crops evaluated.
    """
    if model.prior_hash != priors.content_hash():
        raise CheckpointError("model and prior set do not match")
    H, W = image.shape[:2]
    crops = plan_crops(W, H, crop_plan, panorama_id=pano_id)
    feats = crop_features(image, crops, model.grid)
    loc, logits, _ = forward_features(model, feats)
    conf = sigmoid(logits)
    boxes = np.clip(loc + priors.priors[None], 0.0, 1.0)
    dets: list[Detection] = []
    for k, crop in enumerate(crops):
        b = boxes[k]
        keep = (conf[k] >= threshold) & (b[:, 0] < b[:, 2]) & (b[:, 1] < b[:, 3])
        if not keep.any():
            continue
        idx = np.flatnonzero(keep)
        idx = idx[edge_filter_mask(b[idx], crop, edge_margin)]
        if len(idx) == 0:
            continue
        pano_boxes = crop_to_pano_array(b[idx], crop)
        for i, pb in zip(idx, pano_boxes):
            dets.append(Detection(Box.from_array(pb), float(conf[k, i]), None, crop.crop_id, pano_id))
    return dets, len(crops)


def postclassify_detections(post: PostClassifierParams, image: np.ndarray, dets, expansion: float):
    if not dets:
        return []
    feats = []
    for d in dets:
        eb = expand_box(d.box, expansion, frame_limits=(-1.0, 0.0, 2.0, 1.0))
        feats.append(featurize(extract_region(image, eb.x_min, eb.y_min, eb.x_max, eb.y_max), post.grid))
    scores = postclassify_features(post, np.array(feats))
    # keep scores in (0, 1] so fusion stays defined
    scores = np.clip(scores, 1e-12, 1.0)
    return [d.with_post_score(float(s)) for d, s in zip(dets, scores)]


def detect_panorama(model: ModelParams, postclassifier: PostClassifierParams | None, image: np.ndarray,
                    priors: PriorSet, pipeline_cfg: PipelineConfig = PipelineConfig(),
                    crop_plan: CropPlanConfig | None = None, pano_id: str = ""):
    """Plan crops, run the detector, decode, threshold, edge-filter, merge
    with NMS and optionally rescore survivors.  Returns detections sorted by
    final score and a :class:`CostReport`."""
    crop_plan = crop_plan or CropPlanConfig()
    props, n_crops = raw_proposals(model, image, priors, crop_plan, pipeline_cfg.proposal_threshold,
                                   pipeline_cfg.edge_margin, pano_id)
    kept = nms(props, pipeline_cfg.nms_threshold)
    n_post = 0
    if pipeline_cfg.postclassify and postclassifier is not None:
        kept = postclassify_detections(postclassifier, image, kept, pipeline_cfg.expansion_fraction)
        n_post = len(kept)
    return sort_detections(kept), cost_report(n_crops, n_post)


def calibrate_threshold(per_pano_scores, target_per_pano: float, floor: float = 1e-6) -> float:
    """Score threshold giving ``target_per_pano`` proposals per panorama on
    average.

    ``per_pano_scores`` holds, for each validation panorama, the detector
    scores of its post-NMS detections at a low threshold.  Greedy NMS never
    lets a lower-scored box suppress a higher one, so raising the threshold
    simply truncates each list.
    """
    all_scores = np.sort(np.concatenate([np.asarray(s, dtype=np.float64) for s in per_pano_scores] or [[]]))[::-1]
    n_panos = len(per_pano_scores)
    if n_panos == 0:
        raise ValueError("need at least one validation panorama")
    k = int(round(target_per_pano * n_panos))
    if k <= 0:
        return float(min(1.0 - 1e-9, all_scores[0] + 1e-9)) if len(all_scores) else 0.5
    if k >= len(all_scores):
        return float(max(floor, all_scores[-1])) if len(all_scores) else floor
    return float(max(floor, all_scores[k - 1]))


def ground_truth_overlap(dets, gts) -> np.ndarray:
    """Max wrap-aware Jaccard of each detection against the ground truth."""
    if not dets:
        return np.zeros(0)
    g = as_box_array(gts)
    if len(g) == 0:
        return np.zeros(len(dets))
    return jaccard_matrix(as_box_array([d.box for d in dets]), g, wrap=True).max(axis=1)
