"""MultiBox objective: squared-L2 localization on matched priors plus a
logistic confidence loss on every prior, with its analytic gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box, as_box_array
from .matching import MatchResult
from .priors import PriorSet


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.3
    confidence_clamp: float = 1e-7

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.confidence_clamp < 0.5:
            raise ValueError("confidence_clamp must lie in (0, 0.5)")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit(c):
    c = np.asarray(c, dtype=np.float64)
    return np.log(c) - np.log1p(-c)


@dataclass(frozen=True)
class DetectorOutput:
    """Per-crop network output: ``(n, 4)`` location residuals relative to the
    priors and ``(n,)`` confidence logits."""

    loc_residuals: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.loc_residuals, dtype=np.float64).reshape(-1, 4)
        lg = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        if len(loc) != len(lg):
            raise ValueError("location and confidence outputs disagree on n")
        if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(lg))):
            raise ValueError("detector output must be finite")
        object.__setattr__(self, "loc_residuals", loc)
        object.__setattr__(self, "logits", lg)

    @property
    def n(self) -> int:
        return len(self.logits)

    @property
    def confidences(self) -> np.ndarray:
        return sigmoid(self.logits)

    @classmethod
    def from_confidences(cls, loc_residuals, confidences) -> "DetectorOutput":
        return cls(loc_residuals, logit(np.asarray(confidences, dtype=np.float64)))


def _prior_array(priors) -> np.ndarray:
    return priors.priors if isinstance(priors, PriorSet) else as_box_array(priors)


def decode_locations(output: DetectorOutput, priors) -> np.ndarray:
    """``l_i = l_i' + p_i`` componentwise; returns an ``(n, 4)`` array."""
    p = _prior_array(priors)
    if len(p) != output.n:
        raise ValueError(f"output has {output.n} slots but there are {len(p)} priors")
    return output.loc_residuals + p


def decode_boxes(output: DetectorOutput, priors) -> list[Box | None]:
    """Inference-time decoding: clamp to the unit square, ``None`` where the
    clamped box is degenerate."""
    locs = np.clip(decode_locations(output, priors), 0.0, 1.0)
    out = []
    for row in locs:
        out.append(Box.from_array(row) if row[0] < row[2] and row[1] < row[3] else None)
    return out


def _targets(n: int, gts: np.ndarray, match: MatchResult) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Matched prior indices, their gt boxes, and the 0/1 confidence target."""
    idx = np.array([i for i, _, _ in match.pairs], dtype=np.int64)
    gidx = np.array([j for _, j, _ in match.pairs], dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise ValueError("match references a prior index out of range")
    if len(gidx) and (gidx.min() < 0 or gidx.max() >= len(gts)):
        raise ValueError("match references a ground-truth index out of range")
    if len(set(idx.tolist())) != len(idx):
        raise ValueError("match uses a prior twice")
    target = np.zeros(n)
    target[idx] = 1.0
    return idx, gts[gidx] if len(gidx) else np.zeros((0, 4)), target


def loss_and_grad(output: DetectorOutput, priors, gts, match: MatchResult,
                  cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss value with gradients w.r.t. the location residuals and logits."""
    g = as_box_array(gts)
    locs = decode_locations(output, priors)
    idx, matched_gt, target = _targets(output.n, g, match)
    eps = cfg.confidence_clamp
    c = np.clip(sigmoid(output.logits), eps, 1.0 - eps)

    diff = locs[idx] - matched_gt
    loc_loss = 0.5 * cfg.alpha * float(np.sum(diff * diff))
    conf_loss = -float(np.sum(np.where(target > 0, np.log(c), np.log1p(-c))))

    d_loc = np.zeros_like(locs)
    d_loc[idx] = cfg.alpha * diff
    d_logit = c - target
    return loc_loss + conf_loss, d_loc, d_logit


def multibox_loss(output: DetectorOutput, priors, gts, match: MatchResult,
                  cfg: LossConfig = LossConfig()) -> float:
    """Sum over matched pairs of ``alpha/2 * ||l_i - g_j||^2 - log c_i`` plus
    ``-log(1 - c_i)`` over unmatched priors."""
    return loss_and_grad(output, priors, gts, match, cfg)[0]


def multibox_grad(output: DetectorOutput, priors, gts, match: MatchResult,
                  cfg: LossConfig = LossConfig()) -> tuple[np.ndarray, np.ndarray]:
    _, d_loc, d_logit = loss_and_grad(output, priors, gts, match, cfg)
    return d_loc, d_logit
