"""Why a model trained without no-target samples still fires on them.

    python scripts/no_target_diagnosis.py --dataset runs/default/data --checkpoint runs/default/run/stage2

Prints, for the no-target test samples, which slot carries the top score and
how much mask that slot draws, and for the training samples how often each
slot is the one the matching assigns.
"""

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from setseg import scenes
from setseg.matching import LossWeights, build_cost, hungarian
from setseg.model import SetSegModel
from setseg.tensor import no_grad


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", type=Path, required=True)
    ap.add_argument("--checkpoint", type=Path, required=True)
    ap.add_argument("--train-samples", type=int, default=300)
    args = ap.parse_args()

    model = SetSegModel.load(args.checkpoint)
    tau = model.cfg.tau
    test = [s for s in scenes.load_jsonl(args.dataset / "test.jsonl") if s.n_targets == 0]
    top_slot, area, peak, best = Counter(), [], [], []
    for s in test:
        p = model.predict(s)
        k = int(np.argmax(p.scores))
        top_slot[k] += 1
        best.append(p.scores[k])
        area.append(int(p.binary[k].sum()))
        peak.append(float(p.masks[k].max()))
    best, area, peak = map(np.array, (best, area, peak))
    q = [0.1, 0.5, 0.9]
    report = {
        "no_target_samples": len(test),
        "fired": int((best >= tau).sum()),
        "top_slot_counts": dict(sorted(top_slot.items())),
        "top_score_quantiles": np.round(np.quantile(best, q), 3).tolist(),
        "top_slot_empty_binary_mask": int((area == 0).sum()),
        "top_slot_peak_pixel_prob_quantiles": np.round(np.quantile(peak, q), 3).tolist(),
    }

    train = [s for s in scenes.load_jsonl(args.dataset / "train.jsonl") if s.n_targets > 0]
    matched = Counter()
    for s in train[:args.train_samples]:
        with no_grad():  # the teacher-forced forward used in training
            out = model.forward_batch(s.grid[None], [s.instruction], [s.phrase])
        a = hungarian(build_cost(out.masks.data[0], out.scores.data[0], s.masks, LossWeights()))
        matched.update(k for k, _ in a.pairs)
    n = min(len(train), args.train_samples)
    report["train_match_rate_per_slot"] = {k: round(v / n, 3) for k, v in sorted(matched.items())}
    print(json.dumps(report, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
