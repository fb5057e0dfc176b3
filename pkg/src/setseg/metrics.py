"""Instance-level mAP, semantic gIoU/cIoU and no-target accuracy.

Predictions are given per instruction id as the *selected* set: binary masks
plus presence scores.  AP pools predictions from every instruction that has
at least one ground-truth instance; no-target instructions are scored by
no-target accuracy and by the gIoU/cIoU conventions instead.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import rle

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class Prediction:
    masks: np.ndarray  # (n, G, G) bool
    scores: np.ndarray  # (n,)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.masks.shape[0] != self.scores.shape[0]:
            raise ValueError("one score per predicted mask")

    @classmethod
    def empty(cls, grid: int) -> "Prediction":
        return cls(np.zeros((0, grid, grid), dtype=bool), np.zeros(0))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _iou_matrix(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    p = preds.reshape(len(preds), -1).astype(np.int64)
    g = gts.reshape(len(gts), -1).astype(np.int64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return iou


def average_precision(preds: Mapping[str, Prediction], gts: Mapping[str, np.ndarray],
                      iou_threshold: float) -> float | None:
    """101-point interpolated AP over the pooled predictions of ``gts``' instructions.

    Returns None when there is no ground-truth instance at all.
    """
    ids = sorted(gts)
    npos = sum(int(np.asarray(gts[i]).shape[0]) for i in ids)
    if npos == 0:
        return None
    entries = []  # (-score, id, slot, iou row)
    for sid in ids:
        p = preds.get(sid)
        if p is None or len(p.scores) == 0:
            continue
        g = np.asarray(gts[sid], dtype=bool)
        ious = _iou_matrix(p.masks, g) if g.shape[0] else np.zeros((len(p.scores), 0))
        for k in range(len(p.scores)):
            entries.append((-float(p.scores[k]), sid, k, ious[k]))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    taken = {sid: np.zeros(np.asarray(gts[sid]).shape[0], dtype=bool) for sid in ids}
    tp = np.zeros(len(entries))
    for n, (_, sid, _, iou) in enumerate(entries):
        if iou.size == 0:
            continue
        cand = np.where(taken[sid], -1.0, iou)
        best = int(np.argmax(cand))
        if cand[best] >= iou_threshold:
            taken[sid][best] = True
            tp[n] = 1.0
    if not entries:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    inds = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.array([precision[i] if i < len(precision) else 0.0 for i in inds])
    return float(q.mean())


def union_mask(masks: np.ndarray, grid_shape) -> np.ndarray:
    masks = np.asarray(masks, dtype=bool)
    if masks.shape[0] == 0:
        return np.zeros(grid_shape, dtype=bool)
    return masks.any(axis=0)


def sample_iou(pred: Prediction, gt: np.ndarray) -> float:
    gt = np.asarray(gt, dtype=bool)
    shape = gt.shape[1:] if gt.ndim == 3 and gt.shape[0] else pred.masks.shape[1:]
    if gt.shape[0] == 0:
        return 1.0 if len(pred.scores) == 0 else 0.0
    return mask_iou(union_mask(pred.masks, shape), union_mask(gt, shape))


def giou(preds: Mapping[str, Prediction], gts: Mapping[str, np.ndarray]) -> float:
    ids = sorted(gts)
    if not ids:
        return 1.0
    return float(np.mean([sample_iou(preds[i], gts[i]) for i in ids]))


def ciou(preds: Mapping[str, Prediction], gts: Mapping[str, np.ndarray]) -> float:
    inter = 0
    union = 0
    for sid in sorted(gts):
        g = np.asarray(gts[sid], dtype=bool)
        p = preds[sid]
        shape = g.shape[1:] if g.shape[0] else p.masks.shape[1:]
        if not shape:
            continue
        up = union_mask(p.masks, shape)
        ug = union_mask(g, shape)
        inter += int(np.logical_and(up, ug).sum())
        union += int(np.logical_or(up, ug).sum())
    return 1.0 if union == 0 else inter / union


@dataclass
class StratumReport:
    count: int
    mAP: float | None = None
    AP50: float | None = None
    gIoU: float | None = None
    cIoU: float | None = None
    no_target_accuracy: float | None = None


@dataclass
class MetricsReport:
    count: int
    mAP: float | None
    AP50: float | None
    gIoU: float
    cIoU: float
    no_target_accuracy: float | None
    strata: dict[str, StratumReport] = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["strata"] = {k: asdict(v) for k, v in self.strata.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        cols = ("count", "mAP", "AP50", "gIoU", "cIoU", "no_target_accuracy")
        rows = [("overall", self.as_dict())] + [(k, asdict(v)) for k, v in self.strata.items()]
        head = f"{'stratum':<10}" + "".join(f"{c:>20}" for c in cols)
        lines = [head, "-" * len(head)]
        for name, vals in rows:
            cells = []
            for c in cols:
                v = vals.get(c)
                cells.append(f"{'-':>20}" if v is None else f"{v:>20d}" if isinstance(v, int) else f"{v:>20.4f}")
            lines.append(f"{name:<10}" + "".join(cells))
        return "\n".join(lines) + "\n"


def _stratum(n: int) -> str:
    return "none" if n == 0 else "single" if n == 1 else "multi"


def _ap_pair(preds, gts) -> tuple[float | None, float | None]:
    aps = [average_precision(preds, gts, t) for t in IOU_THRESHOLDS]
    if aps[0] is None:
        return None, None
    return float(np.mean(aps)), aps[0]


def evaluate(gts: Mapping[str, np.ndarray], preds: Mapping[str, Prediction]) -> MetricsReport:
    """Full report from per-instruction ground truth (N, G, G) and selected predictions."""
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise KeyError(f"no prediction for instruction ids {missing[:5]}")
    groups: dict[str, dict[str, np.ndarray]] = {"single": {}, "multi": {}, "none": {}}
    for sid, g in gts.items():
        groups[_stratum(np.asarray(g).shape[0])][sid] = g
    strata = {}
    for name, sub in groups.items():
        rep = StratumReport(count=len(sub))
        if sub:
            rep.gIoU = giou(preds, sub)
            rep.cIoU = ciou(preds, sub)
            if name == "none":
                rep.no_target_accuracy = float(np.mean([len(preds[i].scores) == 0 for i in sorted(sub)]))
            else:
                rep.mAP, rep.AP50 = _ap_pair(preds, sub)
        strata[name] = rep
    targeted = {**groups["single"], **groups["multi"]}
    m, a50 = _ap_pair(preds, targeted)
    return MetricsReport(
        count=len(gts), mAP=m, AP50=a50,
        gIoU=giou(preds, gts), cIoU=ciou(preds, gts),
        no_target_accuracy=strata["none"].no_target_accuracy, strata=strata,
    )


# ---------------------------------------------------------------- file io

def write_predictions(path: str | Path, preds: Mapping[str, Prediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(preds):
            p = preds[sid]
            fh.write(json.dumps({"id": sid, "masks": [rle.encode(m) for m in p.masks],
                                 "scores": [float(s) for s in p.scores]}, sort_keys=True) + "\n")


def read_predictions(path: str | Path, grid: int) -> dict[str, Prediction]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            masks = [rle.decode(m, (grid, grid)) for m in d["masks"]]
            out[d["id"]] = Prediction(np.asarray(masks, dtype=bool).reshape(len(masks), grid, grid), d["scores"])
    return out
