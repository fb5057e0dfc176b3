"""Training objectives: masked next-token loss, matched mask loss, presence loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vocab
from .matching import DICE_EPS, LossWeights, MatchAssignment
from .tensor import Tensor


@dataclass
class TextTarget:
    """Next-token targets for a run of logit rows, with per-row supervision flags."""

    targets: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.targets.shape != self.mask.shape:
            raise ValueError("targets and mask must align")


def response_target(instruction, phrase, K: int, mask_end: bool = True) -> tuple[int, TextTarget]:
    """Targets for the response y = phrase, trigger, K query slots, (mask_end).

    Returns the offset of the first predicting row relative to the first
    text row, so the caller can slice the model's text logits.
    """
    y = list(phrase) + [vocab.TRIGGER_ID] + [vocab.QUERY_ID] * K
    m = [1.0] * (len(phrase) + 1) + [0.0] * K
    if mask_end:
        y.append(vocab.MASK_END_ID)
        m.append(0.0)
    return len(instruction), TextTarget(np.array(y), np.array(m))


def text_loss(logits: Tensor, target: TextTarget) -> Tensor:
    if target.mask.sum() <= 0:
        raise ValueError("text loss needs at least one supervised position")
    return T.cross_entropy(logits, target.targets, target.mask)


def dice_loss(p: Tensor, g: np.ndarray) -> Tensor:
    """Smoothed Dice loss over the trailing grid axes; returns one value per leading index."""
    g = np.asarray(g, dtype=np.float64)
    axes = tuple(range(1, p.ndim))
    inter = T.tsum(p * g, axis=axes)
    denom = T.tsum(p, axis=axes) + g.sum(axis=axes) + DICE_EPS
    return 1.0 - (inter * 2.0 + DICE_EPS) / denom


def seg_loss(masks: Tensor, gts: np.ndarray, assign: MatchAssignment, weights: LossWeights) -> Tensor:
    """Weighted BCE + Dice averaged over matched (slot, instance) pairs; 0 when nothing matched."""
    if not assign.pairs:
        return T.tensor(0.0)
    slots = np.array([k for k, _ in assign.pairs])
    idx = np.array([i for _, i in assign.pairs])
    p = masks[slots]
    g = np.asarray(gts, dtype=np.float64)[idx]
    npix = int(np.prod(g.shape[1:]))
    bce = T.tsum(T.bce(p, g)) * (1.0 / (npix * len(slots)))
    dice = T.mean(dice_loss(p, g))
    return bce * weights.bce + dice * weights.dice


def presence_loss(scores: Tensor, targets: np.ndarray) -> Tensor:
    return T.mean(T.bce(scores, targets))


@dataclass
class LossReport:
    total: float
    text: float
    seg: float
    presence: float
    matched: int

    def as_dict(self) -> dict:
        return {"loss": self.total, "text": self.text, "seg": self.seg,
                "presence": self.presence, "matched": self.matched}


def total_loss(text: Tensor, seg: Tensor, presence: Tensor, weights: LossWeights,
               matched: int = 0) -> tuple[Tensor, LossReport]:
    total = text * weights.text + seg * weights.seg + presence * weights.presence
    report = LossReport(float(total.data), float(T.tensor(text).data), float(T.tensor(seg).data),
                        float(T.tensor(presence).data), matched)
    return total, report
