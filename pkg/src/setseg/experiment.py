"""End-to-end pipeline and ablation harness."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics, scenes
from .matching import LossWeights
from .model import SetSegModel, ModelConfig
from .scenes import Sample, SceneConfig
from .train import TrainConfig, train_stage

log = logging.getLogger(__name__)

# desk-scale schedule picked by scripts/lr_sweep.py; the per-stage TrainConfig defaults stay one epoch each
PIPELINE_STAGES = {
    1: dict(stage=1, epochs=4, batch_size=8, lr=1e-3),
    2: dict(stage=2, epochs=6, batch_size=8, lr=3e-4),
}

VARIANTS = ("full", "no_query_bank", "causal_only", "K10", "K50", "K200", "dummy_phrase", "skip_stage1",
            "unfiltered")


@dataclass
class PipelineConfig:
    """Everything needed to reproduce a generate-train-evaluate run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    scenes: SceneConfig = field(default_factory=SceneConfig)
    n_align: int = 2000
    n_train: int = 2000
    n_val: int = 300
    n_test: int = 300
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(**PIPELINE_STAGES[1]))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(**PIPELINE_STAGES[2]))
    weights: LossWeights = field(default_factory=LossWeights)
    skip_stage1: bool = False
    phrase_mode: str = "generated"

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TypeError(f"unknown config keys {sorted(unknown)}")
        base = cls()
        return cls(
            model=ModelConfig.from_dict({**asdict(base.model), **d.get("model", {})}),
            scenes=SceneConfig.from_dict({**asdict(base.scenes), **d.get("scenes", {})}),
            n_align=d.get("n_align", base.n_align),
            n_train=d.get("n_train", base.n_train),
            n_val=d.get("n_val", base.n_val),
            n_test=d.get("n_test", base.n_test),
            stage1=TrainConfig.from_dict({**asdict(base.stage1), **d.get("stage1", {})}),
            stage2=TrainConfig.from_dict({**asdict(base.stage2), **d.get("stage2", {})}),
            weights=LossWeights(**{**asdict(base.weights), **d.get("weights", {})}),
            skip_stage1=d.get("skip_stage1", base.skip_stage1),
            phrase_mode=d.get("phrase_mode", base.phrase_mode),
        )

    def validate(self) -> None:
        self.model.validate()
        self.scenes.validate()
        self.stage1.validate()
        self.stage2.validate()
        self.weights.validate()
        if self.scenes.K != self.model.K and self.scenes.K < self.scenes.max_objects:
            raise ValueError("scene capacity K must cover max_objects")
        if self.scenes.grid != self.model.grid:
            raise ValueError("scene grid and model grid differ")
        if self.phrase_mode not in ("generated", "dummy", "gold"):
            raise ValueError(f"unknown phrase mode {self.phrase_mode!r}")


def generate_splits(cfg: PipelineConfig, seed: int) -> dict[str, list[Sample]]:
    align_cfg = replace(cfg.scenes, modifiers=("All",), noise_rate=0.0, apply_filter=True)
    test_cfg = replace(cfg.scenes, noise_rate=0.0, apply_filter=True)
    return {
        "align": scenes.generate(seed, cfg.n_align, align_cfg, "align"),
        "train": scenes.generate(seed, cfg.n_train, cfg.scenes, "train"),
        "val": scenes.generate(seed, cfg.n_val, test_cfg, "val"),
        "test": scenes.generate(seed, cfg.n_test, test_cfg, "test"),
    }


def predict_dataset(model: SetSegModel, samples: list[Sample], phrase_mode: str = "generated",
                    tau: float | None = None) -> tuple[dict[str, metrics.Prediction], float]:
    """Selected predictions per sample id, and mean seconds per sample."""
    out = {}
    start = time.perf_counter()
    for s in samples:
        p = model.predict(s, phrase_mode=phrase_mode, tau=tau)
        sel = p.selected
        out[s.id] = metrics.Prediction(p.binary[sel], p.scores[sel])
    elapsed = (time.perf_counter() - start) / max(1, len(samples))
    return out, elapsed


def evaluate_model(model: SetSegModel, samples: list[Sample], phrase_mode: str = "generated",
                   tau: float | None = None) -> tuple[metrics.MetricsReport, float]:
    preds, latency = predict_dataset(model, samples, phrase_mode, tau)
    return metrics.evaluate({s.id: s.masks for s in samples}, preds), latency


def train_pipeline(cfg: PipelineConfig, splits: dict[str, list[Sample]], seed: int,
                   out_dir: str | Path | None = None) -> SetSegModel:
    model = SetSegModel(replace(cfg.model, seed=seed))
    out_dir = Path(out_dir) if out_dir is not None else None
    if not cfg.skip_stage1:
        train_stage(model, splits["align"], replace(cfg.stage1, seed=seed), cfg.weights,
                    out_dir / "stage1" if out_dir else None)
    train_stage(model, splits["train"], replace(cfg.stage2, seed=seed), cfg.weights,
                out_dir / "stage2" if out_dir else None)
    return model


def variant_config(cfg: PipelineConfig, variant: str) -> PipelineConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if variant == "no_query_bank":
        return replace(cfg, model=replace(cfg.model, query_bank=False))
    if variant == "causal_only":
        return replace(cfg, model=replace(cfg.model, attention="causal"))
    if variant in ("K10", "K50", "K200"):
        return replace(cfg, model=replace(cfg.model, K=int(variant[1:])))
    if variant == "dummy_phrase":
        return replace(cfg, phrase_mode="dummy")
    if variant == "skip_stage1":
        return replace(cfg, skip_stage1=True)
    if variant == "unfiltered":
        return replace(cfg, scenes=replace(cfg.scenes, apply_filter=False, noise_rate=0.1))
    return cfg


def filtered_noise_config(cfg: PipelineConfig) -> PipelineConfig:
    """The filtered arm of the filtering ablation: same engine noise, filter on."""
    return replace(cfg, scenes=replace(cfg.scenes, apply_filter=True, noise_rate=0.1))


def run_variant(cfg: PipelineConfig, variant: str, seed: int, out_dir: str | Path | None = None) -> dict:
    """Generate data, train and evaluate one variant; returns a JSON-able record."""
    vcfg = variant_config(cfg, variant)
    vcfg.validate()
    splits = generate_splits(vcfg, seed)
    t0 = time.perf_counter()
    model = train_pipeline(vcfg, splits, seed, out_dir)
    train_s = time.perf_counter() - t0
    report, latency = evaluate_model(model, splits["test"], vcfg.phrase_mode)
    rec = {"variant": variant, "seed": seed, "train_seconds": train_s, "latency": latency,
           "report": report.as_dict()}
    log.info("%s seed=%d AP50=%s mAP=%s", variant, seed, report.AP50, report.mAP)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    return rec


def run_ablation(cfg: PipelineConfig, variants, seeds, out_dir: str | Path | None = None) -> list[dict]:
    records = []
    for v in variants:
        for s in seeds:
            sub = Path(out_dir) / f"{v}-seed{s}" if out_dir is not None else None
            records.append(run_variant(cfg, v, s, sub))
    return records


def mean_metric(records: list[dict], variant: str, path: tuple[str, ...]) -> float:
    vals = []
    for r in records:
        if r["variant"] != variant:
            continue
        node = r["report"]
        for p in path:
            node = node[p]
        vals.append(float(node))
    return float(np.mean(vals))


# the full arm doubles as K10 because 10 is the default slot count
SUITE_ARMS = ("full", "no_query_bank", "causal_only", "K50", "K200", "skip_stage1", "unfiltered", "filtered_noise")


def ablation_suite(cfg: PipelineConfig, seeds, arms=SUITE_ARMS, on_record=None) -> list[dict]:
    """Records for every arm and seed, including the filtered arm of the filtering ablation."""
    records = []
    for arm in arms:
        for s in seeds:
            if arm == "filtered_noise":
                rec = run_variant(filtered_noise_config(cfg), "full", s)
                rec["variant"] = arm
            else:
                rec = run_variant(cfg, arm, s)
            records.append(rec)
            if on_record:
                on_record(rec)
    return records
