"""Boxes, overlap, non-maximum suppression and panorama crop planning.

Coordinates are normalized to ``[0, 1]`` in their owning frame (either a
whole equirectangular panorama or a single crop of it).  Panorama frames are
horizontally periodic: a box produced from a crop that wraps the 360 degree
seam keeps ``x_min`` in ``[0, 1)`` and may have ``x_max > 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class InvalidBoxError(ValueError):
    """Raised when a box has non-positive area or non-finite coordinates."""


class NoIntersectionError(ValueError):
    """Raised when mapping a box into a crop it does not touch."""


class CropPlanError(ValueError):
    """Raised for crop plan configurations that cannot be laid out."""


@dataclass(frozen=True, order=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite box {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(f"box has non-positive area: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def shifted(self, dx: float) -> "Box":
        return Box(self.x_min + dx, self.y_min, self.x_max + dx, self.y_max)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def as_box_array(boxes) -> np.ndarray:
    """Accept a sequence of :class:`Box` or 4-sequences, or an ``(N, 4)`` array."""
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64, copy=False)
    rows = [b.as_tuple() if isinstance(b, Box) else tuple(b) for b in boxes]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def jaccard(a: Box, b: Box) -> float:
    """Intersection over union of two boxes in the same frame."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def jaccard_wrapped(a: Box, b: Box) -> float:
    """Overlap on the horizontally periodic panorama frame."""
    return max(jaccard(a, b.shifted(dx)) for dx in (-1.0, 0.0, 1.0))


def jaccard_matrix(a, b, wrap: bool = False) -> np.ndarray:
    """Pairwise overlap between ``(N, 4)`` and ``(M, 4)`` box arrays.

    With ``wrap=True`` the overlap is evaluated with ``b`` shifted by
    -1, 0 and +1 horizontally and the maximum is kept.
    """
    a = as_box_array(a)
    b = as_box_array(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    ih = np.clip(ih, 0.0, None)
    best = np.zeros((len(a), len(b)))
    for dx in ((-1.0, 0.0, 1.0) if wrap else (0.0,)):
        iw = np.minimum(a[:, None, 2], b[None, :, 2] + dx) - np.maximum(a[:, None, 0], b[None, :, 0] + dx)
        inter = np.clip(iw, 0.0, None) * ih
        iou = inter / (area_a[:, None] + area_b[None, :] - inter)
        best = np.maximum(best, iou)
    return best


@dataclass(frozen=True)
class CropSpec:
    panorama_id: str
    x_offset: float
    y_offset: float
    width: float
    height: float
    scale_index: int
    wraps_seam: bool = False
    row: int = 0
    col: int = 0

    @property
    def crop_id(self) -> str:
        return f"{self.panorama_id}/s{self.scale_index}r{self.row}c{self.col}"

    @property
    def touches_top(self) -> bool:
        return self.y_offset <= 1e-12

    @property
    def touches_bottom(self) -> bool:
        return self.y_offset + self.height >= 1.0 - 1e-12


@dataclass(frozen=True)
class Detection:
    """A scored box in the panorama frame.

    ``final_score`` is derived: the detector score alone, or its product with
    the postclassifier score when one has been attached.
    """

    box: Box
    detector_score: float
    post_score: float | None = None
    source_crop: str = ""
    pano_id: str = ""

    @property
    def final_score(self) -> float:
        if self.post_score is None:
            return self.detector_score
        return self.detector_score * self.post_score

    def with_post_score(self, post_score: float) -> "Detection":
        return Detection(self.box, self.detector_score, post_score, self.source_crop, self.pano_id)


def _score_order_key(det: Detection):
    return (-det.final_score, det.box.as_tuple())


def sort_detections(dets: Iterable[Detection]) -> list[Detection]:
    """Descending final score, ties broken by lexicographic box coordinates."""
    return sorted(dets, key=_score_order_key)


def nms(detections: Sequence[Detection], overlap_threshold: float, wrap: bool = True) -> list[Detection]:
    """Greedy non-maximum suppression.

    A detection is kept iff its overlap with every already kept detection is
    at most ``overlap_threshold``.  Overlap is wrap-aware by default since
    detections live in the periodic panorama frame.
    """
    if not 0.0 <= overlap_threshold < 1.0:
        raise ValueError("overlap_threshold must lie in [0, 1)")
    ordered = sort_detections(detections)
    if not ordered:
        return []
    boxes = boxes_to_array(d.box for d in ordered)
    kept: list[int] = []
    for idx in range(len(ordered)):
        if kept:
            ov = jaccard_matrix(boxes[idx : idx + 1], boxes[kept], wrap=wrap)[0]
            if np.any(ov > overlap_threshold):
                continue
        kept.append(idx)
    return [ordered[k] for k in kept]


# ---------------------------------------------------------------------------
# crop planning


@dataclass(frozen=True)
class CropScale:
    """One tiling scale: square crops of side ``side`` (fraction of panorama
    height) covering the vertical band ``[band_top, band_bottom]``."""

    side: float
    band_top: float = 0.0
    band_bottom: float = 1.0


@dataclass(frozen=True)
class CropPlanConfig:
    scales: tuple[CropScale, ...] = field(
        default_factory=lambda: (
            CropScale(1.0, 0.0, 1.0),
            CropScale(0.35, 0.16, 0.90),
            CropScale(0.21, 0.16, 0.90),
        )
    )
    min_overlap: float = 0.2

    @classmethod
    def from_dict(cls, d: dict) -> "CropPlanConfig":
        scales = tuple(CropScale(**s) for s in d["scales"])
        return cls(scales=scales, min_overlap=float(d.get("min_overlap", 0.2)))

    def to_dict(self) -> dict:
        return {
            "scales": [
                {"side": s.side, "band_top": s.band_top, "band_bottom": s.band_bottom} for s in self.scales
            ],
            "min_overlap": self.min_overlap,
        }

    def first_scales(self, k: int) -> "CropPlanConfig":
        return CropPlanConfig(scales=self.scales[:k], min_overlap=self.min_overlap)


# slack for ceil() so that exact multiples do not add a tile
_EPS = 1e-9


def grid_counts(side_px: float, band_px: float, pano_width_px: float, min_overlap: float) -> tuple[int, int]:
    """Closed-form (rows, cols) of the tiling for one scale."""
    step = (1.0 - min_overlap) * side_px
    if side_px >= band_px - _EPS:
        rows = 1
    else:
        rows = math.ceil((band_px - side_px) / step - _EPS) + 1
    if side_px >= pano_width_px - _EPS:
        cols = 1
    else:
        cols = math.ceil(pano_width_px / step - _EPS)
    return rows, cols


def plan_crops(pano_width_px: int, pano_height_px: int, config: CropPlanConfig | None = None,
               panorama_id: str = "") -> list[CropSpec]:
    """Lay out square crops per scale on a seam-wrapping grid.

    Ordering is scale, then row, then column.
    """
    config = config or CropPlanConfig()
    if pano_width_px <= 0 or pano_height_px <= 0:
        raise CropPlanError("panorama dimensions must be positive")
    if not config.scales:
        raise CropPlanError("crop plan needs at least one scale")
    if not 0.0 <= config.min_overlap < 1.0:
        raise CropPlanError("min_overlap must lie in [0, 1)")
    W, H = float(pano_width_px), float(pano_height_px)
    crops: list[CropSpec] = []
    for si, scale in enumerate(config.scales):
        if scale.side <= 0:
            raise CropPlanError("crop side must be positive")
        if scale.side > 1.0 + 1e-12:
            raise CropPlanError(f"crop side {scale.side} exceeds panorama height")
        if not 0.0 <= scale.band_top < scale.band_bottom <= 1.0:
            raise CropPlanError(f"invalid vertical band for scale {si}")
        side_px = scale.side * H
        band_px = (scale.band_bottom - scale.band_top) * H
        rows, cols = grid_counts(side_px, band_px, W, config.min_overlap)
        h = scale.side
        w = min(side_px / W, 1.0)
        if rows == 1:
            centre = 0.5 * (scale.band_top + scale.band_bottom)
            ys = [min(max(centre - h / 2, 0.0), 1.0 - h)]
        else:
            ys = list(np.linspace(scale.band_top, scale.band_bottom - h, rows))
        xs = [c / cols for c in range(cols)]
        for r, y in enumerate(ys):
            for c, x in enumerate(xs):
                crops.append(CropSpec(panorama_id, float(x), float(y), w, h, si,
                                      wraps_seam=x + w > 1.0 + 1e-12, row=r, col=c))
    return crops


# ---------------------------------------------------------------------------
# frame transforms


def _wrap_shift(box: Box, crop: CropSpec) -> float:
    """Horizontal shift (-1, 0 or +1) that puts ``box`` on top of ``crop``."""
    best, best_ov = None, 0.0
    for dx in (0.0, 1.0, -1.0):
        ov = min(box.x_max + dx, crop.x_offset + crop.width) - max(box.x_min + dx, crop.x_offset)
        if ov > best_ov + 1e-15:
            best, best_ov = dx, ov
    if best is None:
        raise NoIntersectionError(f"{box} does not intersect crop {crop.crop_id}")
    return best


def pano_to_crop(box: Box, crop: CropSpec) -> Box:
    dx = _wrap_shift(box, crop)
    iy = min(box.y_max, crop.y_offset + crop.height) - max(box.y_min, crop.y_offset)
    if iy <= 0:
        raise NoIntersectionError(f"{box} does not intersect crop {crop.crop_id}")
    return Box(
        (box.x_min + dx - crop.x_offset) / crop.width,
        (box.y_min - crop.y_offset) / crop.height,
        (box.x_max + dx - crop.x_offset) / crop.width,
        (box.y_max - crop.y_offset) / crop.height,
    )


def crop_to_pano(box: Box, crop: CropSpec) -> Box:
    x0 = crop.x_offset + box.x_min * crop.width
    x1 = crop.x_offset + box.x_max * crop.width
    # keep x_min in [0, 1); x_max may exceed 1 for seam-straddling boxes
    shift = math.floor(x0)
    return Box(
        x0 - shift,
        crop.y_offset + box.y_min * crop.height,
        x1 - shift,
        crop.y_offset + box.y_max * crop.height,
    )


def crop_to_pano_array(boxes: np.ndarray, crop: CropSpec) -> np.ndarray:
    out = np.empty_like(boxes)
    out[:, 0] = crop.x_offset + boxes[:, 0] * crop.width
    out[:, 2] = crop.x_offset + boxes[:, 2] * crop.width
    out[:, 1] = crop.y_offset + boxes[:, 1] * crop.height
    out[:, 3] = crop.y_offset + boxes[:, 3] * crop.height
    shift = np.floor(out[:, 0])
    out[:, 0] -= shift
    out[:, 2] -= shift
    return out


def edge_filter(box: Box, crop: CropSpec, margin: float = 0.1) -> bool:
    """True if a crop-frame box sits inside the central subwindow.

    Top and bottom sides are exempt when the crop touches the panorama's top
    or bottom edge.  Left and right never are: a full 360 degree panorama
    has no horizontal boundary.
    """
    return bool(edge_filter_mask(np.array([box.as_tuple()]), crop, margin)[0])


def edge_filter_mask(boxes: np.ndarray, crop: CropSpec, margin: float = 0.1) -> np.ndarray:
    lo, hi = margin - 1e-12, 1.0 - margin + 1e-12
    keep = (boxes[:, 0] >= lo) & (boxes[:, 2] <= hi)
    if not crop.touches_top:
        keep &= boxes[:, 1] >= lo
    if not crop.touches_bottom:
        keep &= boxes[:, 3] <= hi
    return keep


def split_at_seam(box: Box) -> list[Box]:
    """Split a panorama box straddling the seam into two in-range boxes."""
    if box.x_max <= 1.0 + 1e-12:
        return [box]
    parts = [Box(box.x_min, box.y_min, 1.0, box.y_max)]
    if box.x_max - 1.0 > 1e-12:
        parts.append(Box(0.0, box.y_min, box.x_max - 1.0, box.y_max))
    return parts


# ---------------------------------------------------------------------------
# JSON-lines records

_RECORD_KEYS = ("pano_id", "x_min", "y_min", "x_max", "y_max",
                "detector_score", "post_score", "final_score", "source_crop")


def _num(v: float | None) -> str:
    return "null" if v is None else f"{v:.9f}"


def detection_to_json(det: Detection) -> str:
    b = det.box
    parts = [
        f'"pano_id": {json.dumps(det.pano_id)}',
        f'"x_min": {_num(b.x_min)}',
        f'"y_min": {_num(b.y_min)}',
        f'"x_max": {_num(b.x_max)}',
        f'"y_max": {_num(b.y_max)}',
        f'"detector_score": {_num(det.detector_score)}',
        f'"post_score": {_num(det.post_score)}',
        f'"final_score": {_num(det.final_score)}',
        f'"source_crop": {json.dumps(det.source_crop)}',
    ]
    return "{" + ", ".join(parts) + "}"


def detection_from_json(line: str) -> Detection:
    rec = json.loads(line)
    missing = [k for k in _RECORD_KEYS if k not in rec]
    if missing:
        raise ValueError(f"detection record missing keys {missing}")
    box = Box(rec["x_min"], rec["y_min"], rec["x_max"], rec["y_max"])
    return Detection(box, float(rec["detector_score"]), rec["post_score"],
                     rec["source_crop"], rec["pano_id"])


def write_detections(path, detections: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for det in detections:
            fh.write(detection_to_json(det) + "\n")


def read_detections(path) -> list[Detection]:
    text = Path(path).read_text()
    return [detection_from_json(line) for line in text.splitlines() if line.strip()]


def write_boxes(path, boxes: Iterable[Box], pano_id: str = "") -> None:
    """Ground-truth boxes use the detection record layout with unit scores."""
    write_detections(path, (Detection(b, 1.0, None, "", pano_id) for b in boxes))


def read_boxes(path) -> list[Box]:
    return [d.box for d in read_detections(path)]
