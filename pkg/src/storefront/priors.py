"""Prior boxes: the fixed reference set that anchors every prediction slot."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, as_box_array


@dataclass(frozen=True)
class PriorSet:
    """Ordered prior boxes in crop frame.

    Row ``i`` of :attr:`priors` is prior ``i``; the model head depends on
    this order, so it never changes after construction.
    """

    priors: np.ndarray
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.ascontiguousarray(self.priors, dtype=np.float64).reshape(-1, 4)
        p.setflags(write=False)
        object.__setattr__(self, "priors", p)
        if len(p) == 0:
            raise ValueError("a prior set needs at least one prior")
        if not np.all(np.isfinite(p)):
            raise ValueError("priors must be finite")
        if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
            raise ValueError("priors must lie in the unit square")
        if np.any(p[:, 0] >= p[:, 2]) or np.any(p[:, 1] >= p[:, 3]):
            raise ValueError("priors must have positive area")
        if len(np.unique(p, axis=0)) != len(p):
            raise ValueError("priors must be distinct")

    @property
    def n(self) -> int:
        return len(self.priors)

    def __len__(self) -> int:
        return self.n

    @property
    def boxes(self) -> list[Box]:
        return [Box.from_array(r) for r in self.priors]

    def content_hash(self) -> str:
        data = self.priors.astype("<f8").tobytes()
        return hashlib.sha256(data).hexdigest()

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "seed": self.seed,
            "priors": [[float(v) for v in row] for row in self.priors],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSet":
        ps = cls(np.array(d["priors"], dtype=np.float64), d.get("seed"), d.get("provenance", {}))
        if ps.n != d["n"]:
            raise ValueError(f"prior file declares n={d['n']} but holds {ps.n} priors")
        return ps

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PriorSet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centres = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError("not enough distinct boxes for the requested number of priors")
        idx = rng.choice(len(x), p=d2 / total)
        centres.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centres)


def _assign(x: np.ndarray, centres: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * x @ centres.T
        + np.sum(centres * centres, axis=1)[None, :]
    )
    d2 = np.maximum(d2, 0.0)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(x)), labels]


def cluster_priors(gt_boxes, n: int, seed: int = 0, iters: int = 50, source: str = "") -> PriorSet:
    """k-means over corner 4-vectors with squared Euclidean distance.

    Seeded with k-means++; an emptied cluster is re-seeded at the point
    farthest from its current centre, which can only lower the objective.
    """
    x = as_box_array(gt_boxes)
    if len(x) == 0:
        raise ValueError("cannot cluster an empty box set")
    if n <= 0:
        raise ValueError("number of priors must be positive")
    if iters <= 0:
        raise ValueError("iters must be positive")
    if n > len(np.unique(x, axis=0)):
        raise ValueError(f"{n} priors requested from fewer distinct boxes")
    rng = np.random.default_rng(seed)
    centres = _kmeans_pp_init(x, n, rng)
    labels, d2 = _assign(x, centres)
    history = [float(d2.sum())]
    done = 0
    for done in range(1, iters + 1):
        new = centres.copy()
        counts = np.bincount(labels, minlength=n)
        for k in range(n):
            if counts[k]:
                new[k] = x[labels == k].mean(axis=0)
        for k in np.flatnonzero(counts == 0):
            far = int(np.argmax(d2))
            new[k] = x[far]
            d2[far] = 0.0
        labels, d2 = _assign(x, new)
        history.append(float(d2.sum()))
        converged = np.array_equal(new, centres)
        centres = new
        if converged:
            break
    centres = np.clip(centres, 0.0, 1.0)
    order = np.lexsort(centres.T[::-1])
    return PriorSet(
        centres[order],
        seed=seed,
        provenance={"method": "kmeans", "source": source, "iterations": done,
                    "objective": history, "num_boxes": len(x)},
    )


def grid_priors(rows: int, cols: int, aspect_ratios=(1.0,), scale: float = 1.0) -> PriorSet:
    """Priors centred on a uniform grid, one per aspect ratio per cell.

    Each prior has width ``base * sqrt(a)`` and height ``base / sqrt(a)``
    with ``base = scale / max(rows, cols)``, clipped to the unit square.
    """
    if rows < 1 or cols < 1:
        raise ValueError("grid needs at least one row and column")
    if any(a <= 0 for a in aspect_ratios):
        raise ValueError("aspect ratios must be positive")
    base = scale / max(rows, cols)
    out = []
    for r in range(rows):
        cy = (r + 0.5) / rows
        for c in range(cols):
            cx = (c + 0.5) / cols
            for a in aspect_ratios:
                w, h = base * np.sqrt(a), base / np.sqrt(a)
                out.append([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
    arr = np.clip(np.array(out), 0.0, 1.0)
    return PriorSet(arr, provenance={"method": "grid", "rows": rows, "cols": cols,
                                     "aspect_ratios": list(aspect_ratios), "scale": scale})
