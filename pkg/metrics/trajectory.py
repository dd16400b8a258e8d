from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from errors import ConfigError
from models.mobility import GridCell


def _as_xy(cells) -> np.ndarray:
    if isinstance(cells, np.ndarray):
        xy = np.asarray(cells, dtype=np.float64)
    else:
        xy = np.array([(c.x, c.y) if isinstance(c, GridCell) else tuple(c) for c in cells], dtype=np.float64)
    return xy.reshape(-1, 2)


@dataclass
class TrajPair:
    """
    Predicted and reference cell sequences as [n x 2] (x, y) arrays.

    `slots` optionally records which of the day's slots the entries belong to.
    """

    predicted: np.ndarray
    reference: np.ndarray
    slots: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.predicted = _as_xy(self.predicted)
        self.reference = _as_xy(self.reference)

    @staticmethod
    def from_cells(predicted: Sequence[GridCell], reference: Sequence[GridCell], slots=None) -> "TrajPair":
        return TrajPair(predicted=_as_xy(predicted), reference=_as_xy(reference), slots=slots)


def _require_nonempty(pair: TrajPair) -> None:
    if len(pair.predicted) == 0 or len(pair.reference) == 0:
        raise ValueError("trajectory metrics need non-empty sequences")


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between every row of a [n x 2] and b [m x 2]."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def accuracy(pair: TrajPair) -> float:
    """Share of positions where predicted and reference cells are identical."""
    _require_nonempty(pair)
    if pair.predicted.shape != pair.reference.shape:
        raise ValueError(f"accuracy needs equal lengths, got {len(pair.predicted)} and {len(pair.reference)}")
    hits = np.all(pair.predicted == pair.reference, axis=1)
    return float(hits.mean())


def dtw(pair: TrajPair) -> float:
    """Total cost of the cheapest monotone alignment (steps right, down, diagonal)."""
    _require_nonempty(pair)
    cost = pairwise_distances(pair.predicted, pair.reference)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def _ngram_similarity(dist: np.ndarray, n: int, beta: float) -> np.ndarray:
    """sim[i, j] = exp(-beta * mean_k dist[i+k, j+k]) for pred n-gram i and ref n-gram j."""
    p = dist.shape[0] - n + 1
    r = dist.shape[1] - n + 1
    total = np.zeros((p, r))
    for k in range(n):
        total += dist[k:k + p, k:k + r]
    return np.exp(-beta * total / n)


def _greedy_match_score(sim: np.ndarray) -> float:
    """Sum of similarities picked greedily, largest first, each n-gram used at most once."""
    p, r = sim.shape
    flat = sim.ravel()
    # Ties resolve to the lower predicted index, then the lower reference index.
    order = np.argsort(-flat, kind="stable")
    used_p = np.zeros(p, dtype=bool)
    used_r = np.zeros(r, dtype=bool)
    total = 0.0
    matched = 0
    for idx in order:
        i, j = divmod(int(idx), r)
        if used_p[i] or used_r[j]:
            continue
        used_p[i] = used_r[j] = True
        total += float(flat[idx])
        matched += 1
        if matched == min(p, r):
            break
    return total


def geo_bleu(
    pair: TrajPair,
    n: int = 3,
    weights: Optional[Sequence[float]] = None,
    beta: float = 0.5,
) -> float:
    """
    BLEU with distance-decayed n-gram similarity instead of exact matches.

    q_n is the greedily matched similarity mass divided by the larger n-gram
    count; orders above the shorter length are dropped and the weights are
    renormalised over the orders kept.
    """
    if beta <= 0.0:
        raise ConfigError(f"geo_bleu beta must be positive, got {beta}")
    if n < 1:
        raise ConfigError(f"geo_bleu n must be at least 1, got {n}")
    _require_nonempty(pair)
    len_pred, len_ref = len(pair.predicted), len(pair.reference)
    orders = min(n, len_pred, len_ref)
    if weights is None:
        w = np.full(orders, 1.0 / orders)
    else:
        if len(weights) < orders:
            raise ConfigError(f"geo_bleu needs {orders} weights, got {len(weights)}")
        w = np.asarray(weights[:orders], dtype=np.float64)
        w = w / w.sum()

    dist = pairwise_distances(pair.predicted, pair.reference)
    log_sum = 0.0
    for order in range(1, orders + 1):
        sim = _ngram_similarity(dist, order, beta)
        q = _greedy_match_score(sim) / max(sim.shape)
        if q <= 0.0:
            return 0.0
        log_sum += w[order - 1] * np.log(q)

    brevity = 1.0 if len_pred >= len_ref else float(np.exp(1.0 - len_ref / len_pred))
    return float(min(1.0, brevity * np.exp(log_sum)))
