"""Optimal slot-to-instance assignment for set prediction."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tensor import BCE_CLAMP

DICE_EPS = 1.0


@dataclass
class LossWeights:
    text: float = 1.0
    seg: float = 1.0
    presence: float = 1.0
    bce: float = 2.0
    dice: float = 0.5

    def validate(self) -> None:
        if min(self.text, self.seg, self.presence, self.bce, self.dice) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class CostMatrix:
    costs: np.ndarray  # (K, N)
    bce: np.ndarray
    dice: np.ndarray
    presence: np.ndarray  # (K, N), the -lambda * score term broadcast over columns

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape


@dataclass
class MatchAssignment:
    pairs: list[tuple[int, int]]
    total_cost: float
    K: int
    unmatched_slots: set[int] = field(default_factory=set)

    def as_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs], "total_cost": self.total_cost,
                "unmatched_slots": sorted(self.unmatched_slots)}


def pairwise_bce(probs: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Per-pixel mean clamped BCE between every prediction and every target: (K, N)."""
    p = np.clip(probs.reshape(len(probs), -1), BCE_CLAMP, 1.0 - BCE_CLAMP)
    g = gts.reshape(len(gts), -1).astype(np.float64)
    npix = p.shape[1]
    return -(np.log(p) @ g.T + np.log(1.0 - p) @ (1.0 - g).T) / npix


def pairwise_dice(probs: np.ndarray, gts: np.ndarray) -> np.ndarray:
    p = probs.reshape(len(probs), -1)
    g = gts.reshape(len(gts), -1).astype(np.float64)
    inter = p @ g.T
    return 1.0 - (2.0 * inter + DICE_EPS) / (p.sum(1)[:, None] + g.sum(1)[None, :] + DICE_EPS)


def build_cost(probs: np.ndarray, scores: np.ndarray, gts: np.ndarray, weights: LossWeights) -> CostMatrix:
    probs = np.asarray(probs, dtype=np.float64)
    gts = np.asarray(gts)
    K = probs.shape[0]
    if gts.shape[0] and gts.shape[1:] != probs.shape[1:]:
        raise ValueError(f"prediction grid {probs.shape[1:]} does not match ground truth {gts.shape[1:]}")
    N = gts.shape[0]
    if N == 0:
        empty = np.zeros((K, 0))
        return CostMatrix(empty, empty.copy(), empty.copy(), empty.copy())
    bce = pairwise_bce(probs, gts)
    dice = pairwise_dice(probs, gts)
    pres = np.repeat(-weights.presence * np.asarray(scores, dtype=np.float64)[:, None], N, axis=1)
    costs = weights.bce * bce + weights.dice * dice + pres
    if not np.isfinite(costs).all():
        raise FloatingPointError("non-finite matching cost")
    return CostMatrix(costs, bce, dice, pres)


def _total(costs: np.ndarray, pairs) -> float:
    total = 0.0
    for k, i in sorted(pairs):
        total += float(costs[k, i])
    return total


def hungarian(costs) -> MatchAssignment:
    """Minimum-cost injective map from GT columns to slot rows (K >= N)."""
    c = np.asarray(costs.costs if isinstance(costs, CostMatrix) else costs, dtype=np.float64)
    K, N = c.shape
    if N > K:
        raise ValueError(f"{N} ground-truth instances exceed the {K} available slots")
    if N == 0:
        return MatchAssignment([], 0.0, K, set(range(K)))
    if not np.isfinite(c).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(c)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {k for k, _ in pairs}
    return MatchAssignment(pairs, _total(c, pairs), K, set(range(K)) - matched)


def brute_force(costs) -> MatchAssignment:
    """Exhaustive minimum over all injective GT-to-slot maps (oracle)."""
    c = np.asarray(costs.costs if isinstance(costs, CostMatrix) else costs, dtype=np.float64)
    K, N = c.shape
    if N > K:
        raise ValueError("more instances than slots")
    best: tuple[float, list] | None = None
    for slots in itertools.permutations(range(K), N):
        pairs = sorted(zip(slots, range(N)))
        total = _total(c, pairs)
        if best is None or total < best[0]:
            best = (total, pairs)
    assert best is not None
    matched = {k for k, _ in best[1]}
    return MatchAssignment(best[1], best[0], K, set(range(K)) - matched)


def presence_targets(assign: MatchAssignment, K: int | None = None) -> np.ndarray:
    K = assign.K if K is None else K
    t = np.zeros(K)
    for k, _ in assign.pairs:
        t[k] = 1.0
    return t
