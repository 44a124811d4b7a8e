"""Maximum-weight bipartite matching of priors to ground-truth boxes.

Edge weights are Jaccard overlaps.  The assignment depends only on the
priors and the ground truth, never on a model's prediction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import as_box_array, jaccard_matrix
from .priors import PriorSet

_TIGHT_TOL = 1e-9


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]
    total_weight: float

    @property
    def prior_to_gt(self) -> dict[int, int]:
        return {i: j for i, j, _ in self.pairs}

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"prior": i, "gt": j, "weight": w}) + "\n" for i, j, w in self.pairs)


def hungarian_min(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimum-cost assignment of every row to a distinct column.

    Shortest augmenting path form of the Hungarian method for a
    ``rows <= cols`` cost matrix.  Returns ``(col_of_row, u, v)`` where ``u``
    and ``v`` are optimal dual potentials: ``cost[r, c] - u[r] - v[c] >= 0``
    everywhere, with equality on the assignment.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_rows, n_cols = cost.shape
    if n_rows > n_cols:
        raise ValueError("hungarian_min needs rows <= cols")
    # 1-based with a sentinel column 0
    u = np.zeros(n_rows + 1)
    v = np.zeros(n_cols + 1)
    owner = np.zeros(n_cols + 1, dtype=np.int64)
    way = np.zeros(n_cols + 1, dtype=np.int64)
    a = np.zeros((n_rows + 1, n_cols + 1))
    a[1:, 1:] = cost
    for r in range(1, n_rows + 1):
        owner[0] = r
        j0 = 0
        minv = np.full(n_cols + 1, np.inf)
        used = np.zeros(n_cols + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.full(n_rows, -1, dtype=np.int64)
    for c in range(1, n_cols + 1):
        if owner[c]:
            col_of_row[owner[c] - 1] = c - 1
    return col_of_row, u[1:], v[1:]


def _best_total(weights: np.ndarray) -> float:
    """Maximum total weight of a matching (rows may stay unmatched)."""
    m, n = weights.shape
    if m == 0 or n == 0:
        return 0.0
    cost = np.concatenate([-weights, np.zeros((m, m))], axis=1)
    cols, _, _ = hungarian_min(cost)
    real = cols < n
    return float(weights[np.flatnonzero(real), cols[real]].sum())


def solve_matching(weights: np.ndarray) -> list[tuple[int, int]]:
    """Optimal matching on a non-negative ``(gts, priors)`` weight matrix.

    Only positive-weight pairs are returned.  Among optimal matchings the
    one whose ``(gt, prior)`` pair list is lexicographically smallest wins.
    """
    m, n = weights.shape
    if m == 0 or n == 0:
        return []
    # each gt may fall back to its own zero-weight dummy column
    cost = np.concatenate([-weights, np.zeros((m, m))], axis=1)
    cols, u, v = hungarian_min(cost)
    reduced = cost - u[:, None] - v[None, :]
    tight = np.abs(reduced) <= _TIGHT_TOL
    positive = np.concatenate([weights > 0, np.zeros((m, m), dtype=bool)], axis=1)
    # options per gt: tight positive priors, plus "unmatched" if any zero-weight column is tight
    options = []
    ambiguous = False
    for j in range(m):
        cand = np.flatnonzero(tight[j] & positive[j]).tolist()
        can_skip = bool(np.any(tight[j] & ~positive[j]))
        options.append((cand, can_skip))
        if len(cand) + int(can_skip) > 1:
            ambiguous = True

    if not ambiguous:
        pairs = []
        for j in range(m):
            c = int(cols[j])
            if c < n and weights[j, c] > 0:
                pairs.append((j, c))
        return pairs

    best = float(sum(weights[j, c] for j, c in enumerate(cols) if c < n))
    tol = 1e-9 * max(1.0, best)
    fixed_total = 0.0
    used_priors: set[int] = set()
    pairs = []
    for j in range(m):
        cand, _ = options[j]
        rest_rows = np.arange(j + 1, m)
        chosen = None
        for i in cand:
            if i in used_priors:
                continue
            keep_cols = np.array([c for c in range(n) if c != i and c not in used_priors], dtype=np.int64)
            sub = weights[np.ix_(rest_rows, keep_cols)] if len(keep_cols) else np.zeros((len(rest_rows), 0))
            value = fixed_total + weights[j, i] + _best_total(sub)
            if value >= best - tol:
                chosen = i
                break
        if chosen is not None:
            pairs.append((j, chosen))
            used_priors.add(chosen)
            fixed_total += weights[j, chosen]
    return pairs


def max_weight_match(priors: PriorSet | np.ndarray, gts) -> MatchResult:
    """Match priors to ground-truth boxes maximizing total Jaccard overlap.

    Zero-overlap pairs are never part of the result.
    """
    p = priors.priors if isinstance(priors, PriorSet) else as_box_array(priors)
    if len(p) == 0:
        raise ValueError("need at least one prior")
    g = as_box_array(gts)
    if len(g) == 0:
        return MatchResult((), 0.0)
    weights = jaccard_matrix(g, p)
    pairs = solve_matching(weights)
    out = tuple((int(i), int(j), float(weights[j, i])) for j, i in sorted(pairs))
    return MatchResult(out, float(sum(w for _, _, w in out)))


class MatchCache:
    """Memoizes matchings per training example.

    Valid because matchings do not depend on model output.
    """

    def __init__(self):
        self._store: dict = {}
        self.hits = 0
        self.misses = 0

    def get(self, key, priors, gts) -> MatchResult:
        if key in self._store:
            self.hits += 1
            return self._store[key]
        self.misses += 1
        res = max_weight_match(priors, gts)
        self._store[key] = res
        return res

    def __len__(self) -> int:
        return len(self._store)
