"""Two-stage training loop with AdamW, checkpoint/resume and per-step JSON logs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .losses import LossReport, presence_loss, response_target, seg_loss, text_loss, total_loss
from .matching import LossWeights, build_cost, hungarian, presence_targets
from .model import PIXEL_EMBEDDER, SetSegModel, ModelConfig
from .params import load_tensors, save_tensors
from .scenes import Sample, derive_seed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 1
    batch_size: int = 8
    lr: float = 3e-4
    lr_llm: float | None = None  # defaults to lr
    warmup_ratio: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    seed: int = 0
    include_no_target: bool = False
    freeze_pixel_embedder: bool | None = None  # None: frozen in stage 2 only

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.lr < 0 or (self.lr_llm is not None and self.lr_llm < 0):
            raise ValueError("learning rates must be nonnegative")

    @property
    def frozen(self) -> bool:
        return self.stage == 2 if self.freeze_pixel_embedder is None else self.freeze_pixel_embedder

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


STAGE_DEFAULTS = {
    1: dict(stage=1, batch_size=8, lr=3e-4),
    2: dict(stage=2, batch_size=4, lr=1e-4),
}


class AdamW:
    def __init__(self, model: SetSegModel, cfg: TrainConfig):
        self.cfg = cfg
        self.params = model.params
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0
        self.frozen = set(PIXEL_EMBEDDER) if cfg.frozen else set()

    def lr_for(self, name: str) -> float:
        if name in self.frozen:
            return 0.0
        if name.startswith("llm.") and self.cfg.lr_llm is not None:
            return self.cfg.lr_llm
        return self.cfg.lr

    def step(self, scale: float = 1.0) -> None:
        c = self.cfg
        self.t += 1
        grads = {k: self.params.grad(k) for k in self.params}
        if c.grad_clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > c.grad_clip:
                grads = {k: g * (c.grad_clip / norm) for k, g in grads.items()}
        b1t = 1.0 - c.beta1**self.t
        b2t = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            lr = self.lr_for(k) * scale
            if lr == 0.0:
                continue
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + c.eps) + c.weight_decay * p.data)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        out["t"] = np.array(float(self.t))
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = state[f"m/{k}"].copy()
            self.v[k] = state[f"v/{k}"].copy()
        self.t = int(state["t"])


def lr_scale(step: int, total: int, warmup_ratio: float) -> float:
    """Linear warmup to 1 over the first warmup_ratio*total steps, then constant."""
    warm = int(math.ceil(warmup_ratio * total))
    if warm <= 0 or step >= warm:
        return 1.0
    return (step + 1) / warm


def layout_length(model: SetSegModel, s: Sample) -> int:
    g = model.cfg.grid
    return g * g + len(s.instruction) + len(s.phrase) + 1 + model.cfg.K + 1


def make_batches(model: SetSegModel, samples: list[Sample], batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Shuffle, bucket by layout length, chunk, then shuffle batch order."""
    rng = np.random.default_rng(derive_seed(seed, 0xBA7C, epoch))
    order = rng.permutation(len(samples))
    buckets: dict[int, list[int]] = {}
    for i in order:
        buckets.setdefault(layout_length(model, samples[i]), []).append(int(i))
    batches = []
    for L in sorted(buckets):
        ids = buckets[L]
        batches += [ids[j:j + batch_size] for j in range(0, len(ids), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def batch_loss(model: SetSegModel, batch: list[Sample], weights: LossWeights):
    """Mean total loss over the batch and the per-sample-averaged report."""
    out = model.forward_batch(np.stack([s.grid for s in batch]), [s.instruction for s in batch],
                              [s.phrase for s in batch], mask_end=True)
    K = model.cfg.K
    totals = []
    reps: list[LossReport] = []
    for b, s in enumerate(batch):
        r0, tt = response_target(s.instruction, s.phrase, K)
        lt = text_loss(out.text_logits[b, r0:r0 + len(tt.targets)], tt)
        masks, scores = out.masks[b], out.scores[b]
        assign = hungarian(build_cost(masks.data, scores.data, s.masks, weights))
        ls = seg_loss(masks, s.masks, assign, weights)
        lp = presence_loss(scores, presence_targets(assign, K))
        tot, rep = total_loss(lt, ls, lp, weights, matched=len(assign.pairs))
        totals.append(tot)
        reps.append(rep)
    loss = T.mean(T.stack(totals))
    n = len(reps)
    report = LossReport(float(loss.data), sum(r.text for r in reps) / n, sum(r.seg for r in reps) / n,
                        sum(r.presence for r in reps) / n, sum(r.matched for r in reps))
    return loss, report


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    steps: int
    log: list[dict] = field(default_factory=list)


def stage_samples(samples: Iterable[Sample], stage: int, include_no_target: bool) -> list[Sample]:
    out = []
    for s in samples:
        if s.n_targets == 0 and not include_no_target:
            continue
        if stage == 1 and s.spec.modifier != "All":
            continue
        out.append(s)
    return out


def train_stage(model: SetSegModel, samples: list[Sample], cfg: TrainConfig,
                weights: LossWeights | None = None, out_dir: str | Path | None = None,
                resume: str | Path | None = None, max_steps: int | None = None,
                on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Run one training stage; writes ``log.jsonl`` and a checkpoint when ``out_dir`` is given."""
    cfg.validate()
    weights = weights or LossWeights()
    data = stage_samples(samples, cfg.stage, cfg.include_no_target)
    if not data:
        raise ValueError(f"no samples usable for stage {cfg.stage}")
    opt = AdamW(model, cfg)
    epoch_batches = [make_batches(model, data, cfg.batch_size, cfg.seed, e) for e in range(cfg.epochs)]
    total_steps = sum(len(b) for b in epoch_batches)
    start = 0
    if resume is not None:
        start = load_checkpoint(resume, model, opt)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "log.jsonl", "a" if resume else "w", encoding="utf-8")
    result = TrainResult(0)
    step = 0
    try:
        for epoch, batches in enumerate(epoch_batches):
            for ids in batches:
                if step < start:
                    step += 1
                    continue
                if max_steps is not None and step >= max_steps:
                    break
                batch = [data[i] for i in ids]
                model.params.zero_grad()
                try:
                    loss, rep = batch_loss(model, batch, weights)
                    if not math.isfinite(rep.total):
                        raise FloatingPointError("non-finite loss")
                    loss.backward()
                except FloatingPointError as exc:
                    _dump_bad_batch(out_dir, step, batch)
                    raise TrainingAborted(f"step {step}: {exc}; batch ids {[s.id for s in batch]}") from exc
                opt.step(lr_scale(step, total_steps, cfg.warmup_ratio))
                entry = {"step": step, **rep.as_dict()}
                result.log.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                if on_step:
                    on_step(entry)
                step += 1
    finally:
        if log_fh:
            log_fh.close()
    result.steps = step
    if out_dir is not None:
        save_checkpoint(out_dir, model, opt, step, cfg)
    return result


def _dump_bad_batch(out_dir, step: int, batch: list[Sample]) -> None:
    if out_dir is None:
        return
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / "abort.json", "w", encoding="utf-8") as fh:
        json.dump({"step": step, "batch_ids": [s.id for s in batch]}, fh)


def save_checkpoint(directory: str | Path, model: SetSegModel, opt: AdamW, step: int, cfg: TrainConfig) -> None:
    directory = Path(directory)
    model.save(directory)
    save_tensors(directory / "optim.bin", opt.state())
    (directory / "state.json").write_text(
        json.dumps({"step": step, "train": asdict(cfg)}, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory: str | Path, model: SetSegModel, opt: AdamW | None = None) -> int:
    directory = Path(directory)
    model.params.load_state(load_tensors(directory / "params.bin"))
    state = json.loads((directory / "state.json").read_text())
    if opt is not None and (directory / "optim.bin").exists():
        opt.load_state(load_tensors(directory / "optim.bin"))
    return int(state["step"])
