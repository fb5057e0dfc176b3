"""Train every ablation arm for a few seeds and print mean metrics per arm.

    python scripts/run_ablation.py --seeds 0 1 2 --out ablation.json

The output file holds one record per (arm, seed), the same records the
acceptance test builds.  Point ``SETSEG_ACCEPTANCE_CACHE`` at a directory and
pass ``--cache`` to drop them where the acceptance run will pick them up.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from setseg.experiment import SUITE_ARMS, PipelineConfig, ablation_suite

COLUMNS = ("mAP", "AP50", "gIoU", "cIoU", "multi AP50", "latency ms", "train s")


def row(records: list[dict]) -> list[float]:
    def m(f):
        return float(np.mean([f(r) for r in records]))
    return [m(lambda r: r["report"]["mAP"]), m(lambda r: r["report"]["AP50"]), m(lambda r: r["report"]["gIoU"]),
            m(lambda r: r["report"]["cIoU"]), m(lambda r: r["report"]["strata"]["multi"]["AP50"]),
            m(lambda r: 1e3 * r["latency"]), m(lambda r: r["train_seconds"])]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path("configs/default.json"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--arms", nargs="+", default=list(SUITE_ARMS), choices=SUITE_ARMS)
    ap.add_argument("--out", type=Path)
    ap.add_argument("--cache", action="store_true", help="also write to $SETSEG_ACCEPTANCE_CACHE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = PipelineConfig.from_dict(json.loads(args.config.read_text()))
    cfg.validate()
    start = time.perf_counter()
    records = ablation_suite(cfg, args.seeds, args.arms,
                             on_record=lambda r: print(f"done {r['variant']} seed {r['seed']} "
                                                       f"AP50 {r['report']['AP50']:.3f} "
                                                       f"({time.perf_counter() - start:.0f}s)", flush=True))
    text = json.dumps(records, indent=2, sort_keys=True)
    if args.out:
        args.out.write_text(text + "\n")
    if args.cache:
        cache_dir = os.environ.get("SETSEG_ACCEPTANCE_CACHE")
        if not cache_dir:
            print("--cache needs SETSEG_ACCEPTANCE_CACHE", file=sys.stderr)
            return 1
        key = hashlib.sha256(json.dumps(cfg.as_dict(), sort_keys=True).encode()).hexdigest()[:12]
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        (Path(cache_dir) / f"ablation-{key}.json").write_text(text)

    print(f"{'arm':<16}" + "".join(f"{c:>12}" for c in COLUMNS))
    for arm in args.arms:
        vals = row([r for r in records if r["variant"] == arm])
        print(f"{arm:<16}" + "".join(f"{v:>12.3f}" for v in vals))
    return 0


if __name__ == "__main__":
    sys.exit(main())
