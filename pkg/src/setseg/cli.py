"""Command-line entry point: ``setseg <command> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags or config), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import layout as lay
from . import metrics, scenes, vocab
from .experiment import (VARIANTS, PipelineConfig, evaluate_model, generate_splits, predict_dataset,
                         run_variant)
from .matching import build_cost, hungarian
from .model import SetSegModel
from .train import load_checkpoint, train_stage

log = logging.getLogger("setseg")

COMMANDS = ("gen", "train", "eval", "gradcheck", "ablate", "dump-mask", "dump-matching")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="setseg", description="Instruction-conditioned multi-instance segmentation toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="pipeline config (JSON)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.add_argument("--tau", type=float, help="presence threshold override")
    p.add_argument("--dataset", type=Path, help="dataset directory or JSONL file")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--variant", help=f"ablation variant: {', '.join(VARIANTS)} or 'all'")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds for ablate")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--predictions", type=Path, help="evaluate a prediction JSONL file instead of a model")
    p.add_argument("--phrase-mode", choices=("generated", "dummy", "gold"))
    p.add_argument("--dump-mask", type=Path, metavar="PATH",
                   help="write the attention mask of the first sample's layout to PATH")
    p.add_argument("--layout", help="dump-mask layout as vision=4,text=3,phrase=2,K=10[,mask_end=1]")
    p.add_argument("--attention", choices=("hybrid", "causal"), default="hybrid")
    p.add_argument("--index", type=int, default=0, help="sample index for dump commands")
    p.add_argument("--count", type=int, default=1, help="samples for dump-matching")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(path: Path | None) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        try:
            cfg = PipelineConfig.from_dict(raw)
        except TypeError as exc:
            raise UsageError(f"bad config {path}: {exc}") from None
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out: Path, args, cfg: PipelineConfig) -> None:
    manifest = {
        "command": args.command,
        "config": str(args.config) if args.config else None,
        "seed": args.seed,
        "git": git_describe(),
        "out": str(out),
        "resolved_config": cfg.as_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dataset_file(path: Path, split: str) -> Path:
    return path / f"{split}.jsonl" if path.is_dir() else path


def workers() -> int:
    env = os.environ.get("SETSEG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError("SETSEG_THREADS must be an integer") from None
    return os.cpu_count() or 1


# ------------------------------------------------------------------ commands

def cmd_gen(args, cfg: PipelineConfig) -> int:
    if args.out is None:
        raise UsageError("gen needs --out")
    splits = generate_splits(cfg, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, samples in splits.items():
        scenes.save_jsonl(args.out / f"{name}.jsonl", samples)
    (args.out / "vocab.json").write_text(json.dumps(vocab.as_json(), indent=2, sort_keys=True) + "\n")
    write_manifest(args.out, args, cfg)
    print(json.dumps({k: len(v) for k, v in splits.items()}, sort_keys=True))
    return 0


def cmd_train(args, cfg: PipelineConfig) -> int:
    if args.out is None or args.dataset is None:
        raise UsageError("train needs --dataset and --out")
    if not args.dataset.exists():
        raise UsageError(f"dataset {args.dataset} does not exist")
    args.out.mkdir(parents=True, exist_ok=True)
    model = SetSegModel(replace(cfg.model, seed=args.seed))
    if args.checkpoint is not None:
        load_checkpoint(args.checkpoint, model)
    stages = {"1": [1], "2": [2], "both": [2] if cfg.skip_stage1 else [1, 2]}[args.stage]
    for st in stages:
        split = "align" if st == 1 else "train"
        samples = scenes.load_jsonl(_dataset_file(args.dataset, split))
        tcfg = replace(cfg.stage1 if st == 1 else cfg.stage2, seed=args.seed)
        res = train_stage(model, samples, tcfg, cfg.weights, args.out / f"stage{st}")
        print(json.dumps({"stage": st, "steps": res.steps, "final": res.log[-1] if res.log else None},
                         sort_keys=True))
    write_manifest(args.out, args, cfg)
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    if args.dataset is None:
        raise UsageError("eval needs --dataset")
    if args.predictions is None and args.checkpoint is None:
        raise UsageError("eval needs --checkpoint or --predictions")
    if args.tau is not None and not 0.0 <= args.tau <= 1.0:
        raise UsageError("--tau must lie in [0, 1]")
    samples = scenes.load_jsonl(_dataset_file(args.dataset, "test"))
    gts = {s.id: s.masks for s in samples}
    if args.predictions is not None:
        grid = samples[0].grid.shape[0] if samples else cfg.model.grid
        preds = metrics.read_predictions(args.predictions, grid)
    else:
        model = SetSegModel.load(args.checkpoint)
        mode = args.phrase_mode or cfg.phrase_mode
        preds, _ = predict_dataset(model, samples, mode, args.tau)
        if args.dump_mask is not None and samples:
            s = samples[0]
            phrase = model.generate_phrase(s.grid, s.instruction)
            l = model.layout_for(s.instruction, phrase, mask_end=False)
            args.dump_mask.write_text(lay.mask_to_text(model.attention_mask(l)))
    report = metrics.evaluate(gts, preds)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        if args.predictions is None:
            metrics.write_predictions(args.out / "predictions.jsonl", preds)
        (args.out / "report.json").write_text(report.to_json() + "\n")
        (args.out / "report.txt").write_text(report.table())
        write_manifest(args.out, args, cfg)
    print(report.to_json())
    return 0


def gradcheck_report(seed: int) -> dict:
    """Finite-difference check of the full objective on a tiny model with a frozen matching."""
    from .matching import LossWeights
    from .model import ModelConfig
    from .gradcheck import full_loss_check

    rep = full_loss_check(ModelConfig(d=16, layers=2, heads=2, K=4, grid=4, d_dec=16, dec_heads=2,
                                      ff_mult=2, seed=seed), LossWeights(), seed)
    return rep.as_dict()


def cmd_gradcheck(args, cfg: PipelineConfig) -> int:
    rep = gradcheck_report(args.seed)
    print(json.dumps(rep, indent=2, sort_keys=True))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    return 0 if rep["passed"] else 2


def _run_job(job):
    cfg_dict, variant, seed, out = job
    return run_variant(PipelineConfig.from_dict(cfg_dict), variant, seed, out)


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    if args.variant is None:
        raise UsageError("ablate needs --variant")
    names = list(VARIANTS) if args.variant == "all" else args.variant.split(",")
    bad = [n for n in names if n not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}; choose from {VARIANTS}")
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    jobs = []
    for v in names:
        for s in range(args.seed, args.seed + args.seeds):
            out = str(args.out / f"{v}-seed{s}") if args.out else None
            jobs.append((cfg.as_dict(), v, s, out))
    n = min(workers(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            records = list(pool.map(_run_job, jobs))
    else:
        records = [_run_job(j) for j in jobs]
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "ablation.json").write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
        write_manifest(args.out, args, cfg)
    print(json.dumps(records, indent=2, sort_keys=True))
    return 0


def _parse_layout(text: str) -> lay.SequenceLayout:
    fields = {}
    for part in text.split(","):
        key, _, val = part.partition("=")
        if key not in ("vision", "text", "phrase", "K", "mask_end") or not val.isdigit():
            raise UsageError(f"bad --layout field {part!r}")
        fields[key] = int(val)
    mask_end = bool(fields["mask_end"]) if "mask_end" in fields else None
    try:
        return lay.assemble(fields.get("vision", 1), [0] * fields.get("text", 1), [0] * fields.get("phrase", 0),
                            fields.get("K", 10), mask_end=mask_end)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_dump_mask(args, cfg: PipelineConfig) -> int:
    if args.layout is not None:
        layout = _parse_layout(args.layout)
    elif args.dataset is not None:
        samples = scenes.load_jsonl(_dataset_file(args.dataset, "test"))
        s = samples[args.index]
        g = s.grid.shape[0]
        layout = lay.assemble(g * g, s.instruction, s.phrase, cfg.model.K, mask_end=True)
    else:
        raise UsageError("dump-mask needs --layout or --dataset")
    builder = lay.build_hybrid_mask if args.attention == "hybrid" else lay.build_causal_mask
    text = lay.mask_to_text(builder(layout))
    target = args.dump_mask or args.out
    if target is not None:
        Path(target).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_dump_matching(args, cfg: PipelineConfig) -> int:
    if args.dataset is None or args.checkpoint is None:
        raise UsageError("dump-matching needs --dataset and --checkpoint")
    samples = scenes.load_jsonl(_dataset_file(args.dataset, "test"))
    model = SetSegModel.load(args.checkpoint)
    out = []
    for s in samples[args.index:args.index + args.count]:
        p = model.predict(s, phrase_mode="gold")
        cost = build_cost(p.masks, p.scores, s.masks, cfg.weights)
        assign = hungarian(cost)
        out.append({"id": s.id, "cost": cost.costs.tolist(), "bce": cost.bce.tolist(),
                    "dice": cost.dice.tolist(), "presence": cost.presence.tolist(),
                    "assignment": assign.as_dict()})
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


HANDLERS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate, "dump-mask": cmd_dump_mask, "dump-matching": cmd_dump_matching,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config)
        return HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"setseg: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # runtime failure
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
