"""Generate data, train with the default config and evaluate on the test split.

    python scripts/train_default.py --out runs/default --seed 0

This is the end-to-end run behind the toy-training acceptance check, driven
through the CLI so the artifacts on disk match what ``setseg`` writes.
"""

import argparse
import sys
import time
from pathlib import Path

from setseg.cli import main as setseg


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path("configs/default.json"))
    ap.add_argument("--out", type=Path, default=Path("runs/default"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    common = ["--config", str(args.config), "--seed", str(args.seed)]
    data, run, ev = args.out / "data", args.out / "run", args.out / "eval"
    start = time.perf_counter()
    for argv in (["gen", *common, "--out", str(data)],
                 ["train", *common, "--dataset", str(data), "--out", str(run), "-v"],
                 ["eval", *common, "--dataset", str(data), "--checkpoint", str(run / "stage2"), "--out", str(ev)]):
        rc = setseg(argv)
        if rc:
            return rc
    print(f"wall clock {(time.perf_counter() - start) / 60:.1f} min; report in {ev / 'report.txt'}")
    print((ev / "report.txt").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
