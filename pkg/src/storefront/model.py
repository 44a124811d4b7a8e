"""A desk-scale trainable detector head and its SGD trainer.

Input crops are reduced to a small grid of gray values, passed through one
ReLU hidden layer and an affine output layer with ``5n`` values: ``4n``
location residuals followed by ``n`` confidence logits.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import as_box_array
from .loss import DetectorOutput, LossConfig, loss_and_grad, sigmoid
from .matching import MatchCache, max_weight_match
from .priors import PriorSet

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_MAGIC = b"SFMB"
INIT_CONFIDENCE = 0.01
RECEPTIVE_FIELD_PRESETS = {"desk": 32, "full": 224}


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def to_gray(pixels) -> np.ndarray:
    a = np.asarray(pixels)
    if a.ndim == 3 and a.shape[2] in (3, 4):
        a = a[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    elif a.ndim != 2:
        raise ValueError(f"cannot decode image with shape {a.shape}")
    if a.size == 0:
        raise ValueError("empty image")
    return a.astype(np.float32)


def featurize(pixels, grid: int = 32) -> np.ndarray:
    """Area-average the crop down to ``grid x grid`` gray values, centred
    and scaled to roughly unit range."""
    g = to_gray(pixels)
    if g.shape != (grid, grid):
        g = np.asarray(Image.fromarray(g, mode="F").resize((grid, grid), Image.BOX))
    return ((g.astype(np.float64) - 128.0) / 64.0).reshape(-1)


@dataclass
class ModelParams:
    w1: np.ndarray  # (hidden, grid*grid)
    b1: np.ndarray
    w2: np.ndarray  # (5n, hidden)
    b2: np.ndarray
    prior_hash: str
    grid: int = 32
    seed: int = 0

    @property
    def n(self) -> int:
        return self.w2.shape[0] // 5

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "ModelParams":
        return ModelParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
                           self.prior_hash, self.grid, self.seed)


def init_model(priors: PriorSet, seed: int = 0, grid: int = 32, hidden: int = 256) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights; confidence biases start every prior
    at ``INIT_CONFIDENCE``.

    The location rows of the output layer start at zero so that untrained
    predictions coincide with the priors.
    """
    rng = np.random.default_rng(seed)
    d = grid * grid
    n = priors.n
    lim1, lim2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(hidden)
    w1 = rng.uniform(-lim1, lim1, size=(hidden, d))
    b1 = rng.uniform(-lim1, lim1, size=hidden)
    w2 = rng.uniform(-lim2, lim2, size=(5 * n, hidden))
    w2[: 4 * n] = 0.0
    b2 = np.zeros(5 * n)
    b2[4 * n:] = math.log(INIT_CONFIDENCE / (1.0 - INIT_CONFIDENCE))
    return ModelParams(w1, b1, w2, b2, priors.content_hash(), grid, seed)


def forward_features(params: ModelParams, x: np.ndarray):
    """Batched forward pass on ``(B, grid*grid)`` features.

    Returns ``(loc (B, n, 4), logits (B, n), hidden_activations)``.
    """
    x = np.atleast_2d(x)
    pre = x @ params.w1.T + params.b1
    h = np.maximum(pre, 0.0)
    out = h @ params.w2.T + params.b2
    n = params.n
    return out[:, : 4 * n].reshape(-1, n, 4), out[:, 4 * n:], h


def forward(params: ModelParams, crop_pixels) -> DetectorOutput:
    x = featurize(crop_pixels, params.grid)
    loc, logits, _ = forward_features(params, x[None])
    return DetectorOutput(loc[0], logits[0])


def backward(params: ModelParams, x: np.ndarray, h: np.ndarray, d_out: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients given ``d_out`` of shape ``(B, 5n)``."""
    gw2 = d_out.T @ h
    gb2 = d_out.sum(axis=0)
    dh = d_out @ params.w2
    dh[h <= 0.0] = 0.0
    gw1 = dh.T @ x
    gb1 = dh.sum(axis=0)
    return [gw1, gb1, gw2, gb2]


def batch_loss_and_grad(params: ModelParams, x: np.ndarray, priors: PriorSet, gts_list, matches,
                        loss_cfg: LossConfig) -> tuple[float, list[np.ndarray]]:
    """Mean per-example MultiBox loss over a batch and its parameter gradient."""
    loc, logits, h = forward_features(params, x)
    if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(logits))):
        raise TrainingDivergedError("detector output became non-finite")
    n = params.n
    b = len(x)
    d_out = np.empty((b, 5 * n))
    total = 0.0
    for k in range(b):
        out = DetectorOutput(loc[k], logits[k])
        val, d_loc, d_logit = loss_and_grad(out, priors, gts_list[k], matches[k], loss_cfg)
        total += val
        d_out[k, : 4 * n] = d_loc.reshape(-1)
        d_out[k, 4 * n:] = d_logit
    d_out /= b
    return total / b, backward(params, x, h, d_out)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    steps: int = 20000
    batch_size: int = 32
    seed: int = 0
    input_downsample_factor: int = 8
    # matchings depend only on priors and ground truth, so caching is exact
    cache_matches: bool = True
    log_every: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate must be >= 0; steps and batch_size positive")
        if self.input_downsample_factor <= 0:
            raise ValueError("input_downsample_factor must be positive")


@dataclass
class TrainingSet:
    """Featurized crops with crop-frame ground truth."""

    features: np.ndarray  # (N, grid*grid)
    gts: list[np.ndarray]  # per example (m, 4)
    keys: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.features)

    @classmethod
    def from_pairs(cls, pairs, grid: int = 32) -> "TrainingSet":
        feats, gts = [], []
        for crop, boxes in pairs:
            f = np.asarray(crop, dtype=np.float64)
            feats.append(f if f.ndim == 1 and f.size == grid * grid else featurize(crop, grid))
            gts.append(as_box_array(boxes))
        return cls(np.array(feats), gts, list(range(len(feats))))


def sgd_train(params: ModelParams, dataset, cfg: TrainConfig, loss_cfg: LossConfig = LossConfig(),
              priors: PriorSet | None = None) -> tuple[ModelParams, list[float]]:
    """Plain minibatch SGD with a fixed learning rate.

    ``dataset`` is a :class:`TrainingSet` or a sequence of
    ``(crop_pixels, gt_boxes)`` pairs.  Matchings are recomputed every step
    unless ``cfg.cache_matches`` is set.  Returns the trained copy of the
    parameters and the per-step mean batch loss.
    """
    if priors is None:
        raise ValueError("sgd_train needs the prior set the model was built for")
    if priors.content_hash() != params.prior_hash:
        raise CheckpointError("model was initialized for a different prior set")
    data = dataset if isinstance(dataset, TrainingSet) else TrainingSet.from_pairs(dataset, params.grid)
    if len(data) == 0:
        raise ValueError("training set is empty")
    p = params.copy()
    rng = np.random.default_rng(cfg.seed)
    cache = MatchCache() if cfg.cache_matches else None
    trace = []
    bs = min(cfg.batch_size, len(data))
    for step in range(cfg.steps):
        idx = rng.choice(len(data), size=bs, replace=False)
        gts = [data.gts[i] for i in idx]
        if cache is not None:
            matches = [cache.get(data.keys[i], priors, data.gts[i]) for i in idx]
        else:
            matches = [max_weight_match(priors, g) for g in gts]
        val, grads = batch_loss_and_grad(p, data.features[idx], priors, gts, matches, loss_cfg)
        if not math.isfinite(val) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergedError(f"loss became non-finite at step {step}")
        trace.append(val)
        for arr, g in zip(p.arrays(), grads):
            arr -= cfg.learning_rate * g
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f", step, val)
    return p, trace


def tune_learning_rate(params: ModelParams, dataset, cfg: TrainConfig, loss_cfg: LossConfig,
                       priors: PriorSet, candidates=(1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01),
                       trial_steps: int = 100) -> float:
    """Largest candidate rate whose short trial neither diverges nor ends
    above its starting loss."""
    for lr in candidates:
        trial = TrainConfig(lr, trial_steps, cfg.batch_size, cfg.seed, cfg.input_downsample_factor,
                            cfg.cache_matches)
        try:
            _, trace = sgd_train(params, dataset, trial, loss_cfg, priors)
        except TrainingDivergedError:
            continue
        k = max(1, trial_steps // 10)
        if np.mean(trace[-k:]) < np.mean(trace[:k]):
            return lr
    raise TrainingDivergedError("no candidate learning rate trains stably")


# ---------------------------------------------------------------------------
# checkpoints


def _write_blocks(fh, header: dict, arrays) -> None:
    blob = json.dumps(header, sort_keys=True).encode()
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    for a in arrays:
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_blocks(path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        (size,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(size))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        arrays = []
        for shape in header["shapes"]:
            count = int(np.prod(shape))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError("truncated checkpoint")
            arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
        if fh.read(1):
            raise CheckpointError("trailing bytes in checkpoint")
    return header, arrays


def save_checkpoint(path, params: ModelParams) -> None:
    arrays = params.arrays()
    header = {"format_version": FORMAT_VERSION, "kind": "multibox", "prior_set_hash": params.prior_hash,
              "shapes": [list(a.shape) for a in arrays], "grid": params.grid, "seed": params.seed}
    with open(path, "wb") as fh:
        _write_blocks(fh, header, arrays)


def load_checkpoint(path, priors: PriorSet) -> ModelParams:
    """Load a detector, refusing one trained against different priors."""
    header, arrays = _read_blocks(path)
    if header.get("kind") != "multibox":
        raise CheckpointError("checkpoint does not hold a detector")
    if header["prior_set_hash"] != priors.content_hash():
        raise CheckpointError("checkpoint prior_set_hash does not match the prior set")
    w1, b1, w2, b2 = arrays
    if w2.shape[0] != 5 * priors.n:
        raise CheckpointError("output layer size is not 5n")
    return ModelParams(w1, b1, w2, b2, header["prior_set_hash"], header["grid"], header["seed"])


# ---------------------------------------------------------------------------
# postclassifier


@dataclass
class PostClassifierParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray  # (1, hidden)
    b2: np.ndarray
    grid: int = 32
    seed: int = 0

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "PostClassifierParams":
        return PostClassifierParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
                                    self.grid, self.seed)


@dataclass(frozen=True)
class PostClassifierConfig:
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    hidden: int = 256
    grid: int = 32
    negatives_per_positive: int = 7


def init_postclassifier(cfg: PostClassifierConfig) -> PostClassifierParams:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.grid * cfg.grid
    lim1, lim2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(cfg.hidden)
    return PostClassifierParams(
        rng.uniform(-lim1, lim1, size=(cfg.hidden, d)),
        rng.uniform(-lim1, lim1, size=cfg.hidden),
        rng.uniform(-lim2, lim2, size=(1, cfg.hidden)),
        np.zeros(1), cfg.grid, cfg.seed)


def postclassify_features(params: PostClassifierParams, x: np.ndarray) -> np.ndarray:
    h = np.maximum(np.atleast_2d(x) @ params.w1.T + params.b1, 0.0)
    return sigmoid((h @ params.w2.T + params.b2)[:, 0])


def postclassify(params: PostClassifierParams, crop_pixels) -> float:
    """Postclassifier score for one (expanded) box crop."""
    return float(postclassify_features(params, featurize(crop_pixels, params.grid)[None])[0])


def ratio_epochs(n_pos: int, n_neg: int, ratio: int, epochs: int, rng: np.random.Generator):
    """Yield per-epoch example orders mixing every positive once with exactly
    ``ratio`` negatives per positive (negatives cycle without replacement).

    Indices ``< n_pos`` are positives, the rest negatives.
    """
    if n_pos == 0:
        raise ValueError("postclassifier training needs at least one positive")
    if n_neg == 0:
        raise ValueError("postclassifier training needs negatives")
    neg_order = rng.permutation(n_neg)
    cursor = 0
    for _ in range(epochs):
        need = ratio * n_pos
        chosen = []
        while need:
            take = min(need, n_neg - cursor)
            chosen.append(neg_order[cursor:cursor + take])
            cursor += take
            need -= take
            if cursor == n_neg:
                neg_order = rng.permutation(n_neg)
                cursor = 0
                # negatives already used this epoch go to the back of the new cycle
                if need and n_neg > need:
                    used = np.zeros(n_neg, dtype=bool)
                    used[np.concatenate(chosen)] = True
                    neg_order = np.concatenate([neg_order[~used[neg_order]], neg_order[used[neg_order]]])
        order = np.concatenate([np.arange(n_pos)] + [n_pos + c for c in chosen])
        yield rng.permutation(order)


def train_postclassifier(dataset, cfg: PostClassifierConfig = PostClassifierConfig(),
                         params: PostClassifierParams | None = None):
    """Logistic-loss binary classifier trained on a 1:``ratio`` mixture.

    ``dataset`` is a sequence of ``(crop_pixels_or_features, label)``.
    Returns ``(params, per-epoch mean loss)``.
    """
    feats, labels = [], []
    d = cfg.grid * cfg.grid
    for crop, label in dataset:
        f = np.asarray(crop, dtype=np.float64)
        feats.append(f if f.ndim == 1 and f.size == d else featurize(crop, cfg.grid))
        labels.append(1.0 if label else 0.0)
    x = np.array(feats).reshape(-1, d)
    y = np.array(labels)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if len(pos) == 0:
        raise ValueError("postclassifier training needs at least one positive")
    x = np.concatenate([x[pos], x[neg]])
    y = np.concatenate([y[pos], y[neg]])
    p = (params or init_postclassifier(cfg)).copy()
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for order in ratio_epochs(len(pos), len(neg), cfg.negatives_per_positive, cfg.epochs, rng):
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            pre = xb @ p.w1.T + p.b1
            h = np.maximum(pre, 0.0)
            z = (h @ p.w2.T + p.b2)[:, 0]
            c = np.clip(sigmoid(z), 1e-7, 1 - 1e-7)
            losses.append(float(-np.mean(yb * np.log(c) + (1 - yb) * np.log1p(-c))))
            dz = ((c - yb) / len(idx))[:, None]
            gw2 = dz.T @ h
            gb2 = dz.sum(axis=0)
            dh = dz @ p.w2
            dh[h <= 0] = 0.0
            grads = [dh.T @ xb, dh.sum(axis=0), gw2, gb2]
            for arr, g in zip(p.arrays(), grads):
                arr -= cfg.learning_rate * g
        trace.append(float(np.mean(losses)))
        if not math.isfinite(trace[-1]):
            raise TrainingDivergedError("postclassifier loss became non-finite")
    return p, trace


def save_postclassifier(path, params: PostClassifierParams) -> None:
    arrays = params.arrays()
    header = {"format_version": FORMAT_VERSION, "kind": "postclassifier", "prior_set_hash": "",
              "shapes": [list(a.shape) for a in arrays], "grid": params.grid, "seed": params.seed}
    with open(path, "wb") as fh:
        _write_blocks(fh, header, arrays)


def load_postclassifier(path) -> PostClassifierParams:
    header, arrays = _read_blocks(path)
    if header.get("kind") != "postclassifier":
        raise CheckpointError("checkpoint does not hold a postclassifier")
    return PostClassifierParams(*arrays, grid=header["grid"], seed=header["seed"])
