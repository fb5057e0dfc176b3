"""Learning-rate sweep for the two training stages, scored on the validation split.

    python scripts/lr_sweep.py --stage1 3e-4 1e-3 --stage2 1e-4 3e-4 --seed 0

Each (stage-1 lr, stage-2 lr) pair trains from scratch with the epoch counts of
the chosen config and prints validation AP50, mAP and gIoU.  The defaults in
``configs/default.json`` come from this sweep.
"""

import argparse
import itertools
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from setseg.experiment import PipelineConfig, evaluate_model, generate_splits, train_pipeline


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path("configs/default.json"))
    ap.add_argument("--stage1", type=float, nargs="+", default=[3e-4, 1e-3, 3e-3])
    ap.add_argument("--stage2", type=float, nargs="+", default=[1e-4, 3e-4, 1e-3])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, help="write results as JSON")
    args = ap.parse_args()

    cfg = PipelineConfig.from_dict(json.loads(args.config.read_text()))
    cfg.validate()
    splits = generate_splits(cfg, args.seed)
    results = []
    print(f"{'lr1':>8}{'lr2':>8}{'AP50':>8}{'mAP':>8}{'gIoU':>8}{'secs':>8}")
    for lr1, lr2 in itertools.product(args.stage1, args.stage2):
        run = replace(cfg, stage1=replace(cfg.stage1, lr=lr1), stage2=replace(cfg.stage2, lr=lr2))
        start = time.perf_counter()
        model = train_pipeline(run, splits, args.seed)
        rep, _ = evaluate_model(model, splits["val"], run.phrase_mode)
        secs = time.perf_counter() - start
        results.append({"lr1": lr1, "lr2": lr2, "AP50": rep.AP50, "mAP": rep.mAP, "gIoU": rep.gIoU,
                        "seconds": secs})
        print(f"{lr1:>8.0e}{lr2:>8.0e}{rep.AP50:>8.3f}{rep.mAP:>8.3f}{rep.gIoU:>8.3f}{secs:>8.0f}", flush=True)
    best = max(results, key=lambda r: r["AP50"])
    print(f"best: stage-1 lr {best['lr1']:g}, stage-2 lr {best['lr2']:g} (val AP50 {best['AP50']:.3f})")
    if args.out:
        args.out.write_text(json.dumps(results, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
