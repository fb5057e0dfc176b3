"""Synthetic shape scenes with compositional instructions and instance masks.

A scene is a G x G grid holding a few non-touching coloured shapes.  Each
sample pairs a scene with one instruction (selector + modifier) whose ground
truth is resolved symbolically, then passes a quality filter before it is
emitted.  Generation is deterministic: every block of samples draws from its
own generator seeded by splitmix64 over (seed, split, block).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import rle, vocab
from .vocab import COLORS, PLURAL, SHAPES

MODIFIERS = ("All", "Leftmost", "Rightmost", "Largest", "CountK", "Except", "None")
SINGLE_MODIFIERS = ("All", "Leftmost", "Rightmost", "Largest", "Except")
MULTI_MODIFIERS = ("All", "CountK", "Except")
STRATA = ("single", "multi", "none")
VERBS = ("segment", "find", "highlight")

SHAPE_SIZES = {"square": (1, 2, 3), "circle": (2, 3), "triangle": (2, 3)}

_MASK64 = (1 << 64) - 1
_SPLIT_KEYS = {"train": 1, "val": 2, "test": 3, "align": 4}


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    s = splitmix64(seed & _MASK64)
    for k in keys:
        s = splitmix64(s ^ (k & _MASK64))
    return s


def shape_cells(shape: str, size: int) -> list[tuple[int, int]]:
    """Cells of a shape relative to its bounding box's top-left corner."""
    if shape == "square":
        return [(r, c) for r in range(size) for c in range(size)]
    if shape == "circle":
        if size == 2:
            return [(0, 0), (0, 1), (1, 0), (1, 1)]
        return [(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)]
    if shape == "triangle":
        return [(r, c) for r in range(size) for c in range(r + 1)]
    raise ValueError(f"unknown shape {shape!r}")


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str
    color: str
    cells: tuple[tuple[int, int], ...]

    @property
    def left(self) -> int:
        return min(c for _, c in self.cells)

    @property
    def top(self) -> int:
        return min(r for r, _ in self.cells)

    @property
    def size(self) -> int:
        return len(self.cells)

    def mask(self, grid: int) -> np.ndarray:
        m = np.zeros((grid, grid), dtype=bool)
        for r, c in self.cells:
            m[r, c] = True
        return m


@dataclass(frozen=True)
class InstructionSpec:
    color: str | None
    shape: str | None
    modifier: str = "All"
    count: int | None = None
    except_color: str | None = None
    except_shape: str | None = None
    template: int = 0

    def selects(self, obj: SceneObject) -> bool:
        return (self.color is None or obj.color == self.color) and (
            self.shape is None or obj.shape == self.shape)


def _order_key(obj: SceneObject):
    return (obj.left, obj.top, obj.id)


def resolve_objects(spec: InstructionSpec, objects: Iterable[SceneObject]) -> list[SceneObject]:
    """Objects denoted by ``spec``, in a canonical order."""
    pool = sorted((o for o in objects if spec.selects(o)), key=_order_key)
    mod = spec.modifier
    if mod in ("All", "None"):
        return pool
    if not pool:
        return []
    if mod == "Leftmost":
        return [min(pool, key=lambda o: (o.left, o.top, o.id))]
    if mod == "Rightmost":
        return [min(pool, key=lambda o: (-o.left, o.top, o.id))]
    if mod == "Largest":
        return [min(pool, key=lambda o: (-o.size, o.left, o.top, o.id))]
    if mod == "CountK":
        ranked = sorted(pool, key=lambda o: (-o.size, o.left, o.top, o.id))
        return sorted(ranked[: spec.count], key=_order_key)
    if mod == "Except":
        return [o for o in pool if not (
            (spec.except_color is not None and o.color == spec.except_color)
            or (spec.except_shape is not None and o.shape == spec.except_shape))]
    raise ValueError(f"unknown modifier {mod!r}")


# ------------------------------------------------------------------ grammar

def _sel_words(spec: InstructionSpec, plural: bool) -> list[str]:
    noun = spec.shape or "shape"
    words = [spec.color] if spec.color else []
    words.append(PLURAL[noun] if plural else noun)
    return words


def render(spec: InstructionSpec) -> list[str]:
    verb = VERBS[spec.template]
    mod = spec.modifier
    if mod in ("All", "None", "Except"):
        if verb == "find":
            words = [verb, "every", *_sel_words(spec, plural=False)]
        else:
            words = [verb, "all", *_sel_words(spec, plural=True)]
        if mod == "Except":
            if spec.except_color:
                words += ["except", spec.except_color, "ones"]
            else:
                words += ["except", PLURAL[spec.except_shape]]
        return words
    if mod in ("Leftmost", "Rightmost", "Largest"):
        return [verb, "the", mod.lower(), *_sel_words(spec, plural=False)]
    if mod == "CountK":
        return [verb, "the", {2: "two", 3: "three"}[spec.count], "largest", *_sel_words(spec, plural=True)]
    raise ValueError(f"unknown modifier {mod!r}")


def _parse_selector(words: list[str]) -> tuple[str | None, str | None]:
    color = None
    if words and words[0] in COLORS:
        color = words[0]
        words = words[1:]
    if len(words) != 1:
        raise ValueError(f"bad selector {words!r}")
    noun = words[0]
    singular = {v: k for k, v in PLURAL.items()}.get(noun, noun)
    if singular not in (*SHAPES, "shape"):
        raise ValueError(f"bad noun {noun!r}")
    return color, None if singular == "shape" else singular


def parse(words: list[str] | str) -> InstructionSpec:
    """Inverse of :func:`render`.  No-target specs come back as ``All``."""
    if isinstance(words, str):
        words = words.split()
    words = list(words)
    if not words or words[0] not in VERBS:
        raise ValueError(f"instruction must start with a verb: {words!r}")
    template = VERBS.index(words[0])
    rest = words[1:]
    if rest and rest[0] in ("all", "every"):
        body = rest[1:]
        if "except" in body:
            cut = body.index("except")
            color, shape = _parse_selector(body[:cut])
            tail = body[cut + 1:]
            if len(tail) == 2 and tail[0] in COLORS and tail[1] == "ones":
                return InstructionSpec(color, shape, "Except", except_color=tail[0], template=template)
            if len(tail) == 1:
                ex = {v: k for k, v in PLURAL.items()}.get(tail[0])
                if ex in SHAPES:
                    return InstructionSpec(color, shape, "Except", except_shape=ex, template=template)
            raise ValueError(f"bad except clause {tail!r}")
        color, shape = _parse_selector(body)
        return InstructionSpec(color, shape, "All", template=template)
    if len(rest) >= 2 and rest[0] == "the":
        if rest[1] in ("leftmost", "rightmost", "largest"):
            color, shape = _parse_selector(rest[2:])
            return InstructionSpec(color, shape, rest[1].capitalize(), template=template)
        if rest[1] in ("two", "three") and len(rest) > 2 and rest[2] == "largest":
            color, shape = _parse_selector(rest[3:])
            n = 2 if rest[1] == "two" else 3
            return InstructionSpec(color, shape, "CountK", count=n, template=template)
    raise ValueError(f"cannot parse instruction {words!r}")


def canonical_phrase(spec: InstructionSpec) -> list[str]:
    return _sel_words(spec, plural=False)


# ------------------------------------------------------------------ samples

@dataclass
class Sample:
    id: str
    scene_id: str
    grid: np.ndarray
    objects: list[SceneObject]
    spec: InstructionSpec
    instruction: list[int]
    phrase: list[int]
    masks: np.ndarray  # (N, G, G) bool
    corrupted: bool = False

    @property
    def n_targets(self) -> int:
        return int(self.masks.shape[0])

    @property
    def stratum(self) -> str:
        return stratum_of(self.n_targets)

    @property
    def instruction_text(self) -> str:
        return " ".join(vocab.decode(self.instruction))

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "scene_id": self.scene_id,
            "grid": self.grid.tolist(),
            "objects": [
                {"id": o.id, "shape": o.shape, "color": o.color, "cells": [list(c) for c in o.cells]}
                for o in self.objects
            ],
            "instruction": list(self.instruction),
            "instruction_text": self.instruction_text,
            "phrase": list(self.phrase),
            "phrase_text": " ".join(vocab.decode(self.phrase)),
            "masks": [rle.encode(m) for m in self.masks],
            "stratum": self.stratum,
            "spec": asdict(self.spec),
            "corrupted": self.corrupted,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Sample":
        grid = np.asarray(d["grid"], dtype=np.int64)
        g = grid.shape[0]
        masks = [rle.decode(m, (g, g)) for m in d["masks"]]
        return cls(
            id=d["id"],
            scene_id=d.get("scene_id", d["id"]),
            grid=grid,
            objects=[SceneObject(o["id"], o["shape"], o["color"], tuple(tuple(c) for c in o["cells"]))
                     for o in d.get("objects", [])],
            spec=InstructionSpec(**d["spec"]),
            instruction=list(d["instruction"]),
            phrase=list(d["phrase"]),
            masks=np.asarray(masks, dtype=bool).reshape(len(masks), g, g),
            corrupted=bool(d.get("corrupted", False)),
        )


def stratum_of(n: int) -> str:
    return "none" if n == 0 else "single" if n == 1 else "multi"


@dataclass
class SceneConfig:
    grid: int = 8
    min_objects: int = 1
    max_objects: int = 6
    K: int = 10
    mix: tuple[float, float, float] = (0.50, 0.35, 0.15)
    modifiers: tuple[str, ...] = MODIFIERS
    block_size: int = 20
    noise_rate: float = 0.0
    apply_filter: bool = True
    spec_draws: int = 4
    max_tries: int = 400

    def validate(self) -> None:
        if self.grid < 2:
            raise ValueError("grid must be at least 2")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        # every object plus its one-cell moat covers a 2x2 tile of a (G+1)^2 board
        capacity = ((self.grid + 1) // 2) ** 2
        if self.max_objects > capacity:
            raise ValueError(f"{self.max_objects} objects cannot fit on a {self.grid}x{self.grid} grid")
        if abs(sum(self.mix) - 1.0) > 1e-9 or min(self.mix) < 0:
            raise ValueError("stratum mix must be a probability vector")
        unknown = set(self.modifiers) - set(MODIFIERS)
        if unknown:
            raise ValueError(f"unknown modifiers {sorted(unknown)}")
        if self.block_size < 1 or self.spec_draws < 1:
            raise ValueError("block_size and spec_draws must be positive")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "mix" in d:
            d["mix"] = tuple(d["mix"])
        if "modifiers" in d:
            d["modifiers"] = tuple(d["modifiers"])
        return cls(**d)


def _place_objects(rng: np.random.Generator, cfg: SceneConfig) -> list[SceneObject] | None:
    g = cfg.grid
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    occupied = np.zeros((g + 2, g + 2), dtype=bool)  # padded by one for the moat test
    objects: list[SceneObject] = []
    for oid in range(n):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        size = int(rng.choice(SHAPE_SIZES[shape]))
        rel = shape_cells(shape, size)
        placed = None
        for _ in range(60):
            r0 = int(rng.integers(0, g - size + 1))
            c0 = int(rng.integers(0, g - size + 1))
            cells = [(r0 + r, c0 + c) for r, c in rel]
            if all(not occupied[r:r + 3, c:c + 3].any() for r, c in cells):
                placed = cells
                break
        if placed is None:
            return None
        for r, c in placed:
            occupied[r + 1, c + 1] = True
        objects.append(SceneObject(oid, shape, color, tuple(placed)))
    return objects


def render_grid(objects: list[SceneObject], grid: int) -> np.ndarray:
    out = np.zeros((grid, grid), dtype=np.int64)
    for o in objects:
        for r, c in o.cells:
            out[r, c] = vocab.attr_id(o.shape, o.color)
    return out


def _draw_selector(rng, objects, want_match: bool):
    """A (color, shape) selector that matches some object, or none at all."""
    if want_match:
        o = objects[int(rng.integers(len(objects)))]
        kind = int(rng.integers(3))
        return (o.color if kind != 1 else None), (o.shape if kind != 0 else None)
    options = []
    for kind in range(3):
        for color in COLORS:
            for shape in SHAPES:
                sel = ((color if kind != 1 else None), (shape if kind != 0 else None))
                if sel not in options:
                    options.append(sel)
    free = [s for s in options if not any(
        (s[0] is None or o.color == s[0]) and (s[1] is None or o.shape == s[1]) for o in objects)]
    if not free:
        return None
    return free[int(rng.integers(len(free)))]


def _draw_spec(rng, objects, stratum: str, cfg: SceneConfig) -> InstructionSpec | None:
    template = int(rng.integers(len(VERBS)))
    if stratum == "none":
        if "None" not in cfg.modifiers:
            return None
        sel = _draw_selector(rng, objects, want_match=False)
        if sel is None:
            return None
        return InstructionSpec(sel[0], sel[1], "None", template=template)
    allowed = [m for m in (SINGLE_MODIFIERS if stratum == "single" else MULTI_MODIFIERS) if m in cfg.modifiers]
    if not allowed:
        return None
    mod = allowed[int(rng.integers(len(allowed)))]
    color, shape = _draw_selector(rng, objects, want_match=True)
    if mod == "CountK":
        return InstructionSpec(color, shape, mod, count=int(rng.integers(2, 4)), template=template)
    if mod == "Except":
        if color is not None and shape is not None:
            # drop one attribute so the exclusion predicate has room to act
            if rng.integers(2):
                color = None
            else:
                shape = None
        if shape is None:
            ex = SHAPES[int(rng.integers(len(SHAPES)))]
            return InstructionSpec(color, None, mod, except_shape=ex, template=template)
        ex = COLORS[int(rng.integers(len(COLORS)))]
        return InstructionSpec(None, shape, mod, except_color=ex, template=template)
    return InstructionSpec(color, shape, mod, template=template)


def _masks_for(objs: list[SceneObject], grid: int) -> np.ndarray:
    if not objs:
        return np.zeros((0, grid, grid), dtype=bool)
    return np.stack([o.mask(grid) for o in objs])


def _corrupt(rng, sample: Sample, grid: int) -> Sample:
    """Emulate annotation-engine noise by swapping in wrong instance masks."""
    targets = {tuple(map(tuple, np.argwhere(m))) for m in sample.masks}
    others = [o for o in sample.objects if tuple(sorted(o.cells)) not in targets]
    kind = int(rng.integers(3))
    masks = list(sample.masks)
    if kind == 0 and others:
        # wrong target set of the same size where possible
        pick = rng.permutation(len(others))[: max(1, len(masks))]
        masks = [others[i].mask(grid) for i in pick]
    elif kind == 1 and len(masks) >= 1:
        masks.pop(int(rng.integers(len(masks))))
        if others:
            masks.append(others[int(rng.integers(len(others)))].mask(grid))
    elif others:
        masks.append(others[int(rng.integers(len(others)))].mask(grid))
    elif masks:
        masks.pop()
    arr = np.asarray(masks, dtype=bool).reshape(len(masks), grid, grid)
    return replace(sample, masks=arr, corrupted=True)


def filter_sample(sample: Sample, K: int, seen_texts: set[str] | None = None) -> tuple[bool, str]:
    """Quality gate for a resolved sample: (accepted, reason)."""
    if sample.n_targets > K:
        return False, "over-capacity"
    if any(m.sum() < 1 for m in sample.masks):
        return False, "empty-mask"
    try:
        reparsed = parse(vocab.decode(sample.instruction))
    except ValueError:
        return False, "unparseable"
    expected = _masks_for(resolve_objects(reparsed, sample.objects), sample.grid.shape[0])
    if not same_mask_set(expected, sample.masks):
        return False, "inconsistent"
    if seen_texts is not None and sample.instruction_text in seen_texts:
        return False, "duplicate"
    return True, "ok"


def same_mask_set(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape[0] != b.shape[0]:
        return False
    ka = sorted(m.tobytes() for m in a)
    kb = sorted(m.tobytes() for m in b)
    return ka == kb


@dataclass
class GenStats:
    accepted: int = 0
    rejected: dict[str, int] = field(default_factory=dict)
    attempts: int = 0

    @property
    def rejection_rate(self) -> float:
        total = self.accepted + sum(self.rejected.values())
        return sum(self.rejected.values()) / total if total else 0.0


def _block_strata(n: int, mix) -> list[str]:
    quotas = [int(round(n * p)) for p in mix]
    quotas[0] += n - sum(quotas)
    return [s for s, q in zip(STRATA, quotas) for _ in range(q)]


def generate(seed: int, count: int, cfg: SceneConfig | None = None, split: str = "train",
             stats: GenStats | None = None) -> list[Sample]:
    """Deterministically generate ``count`` filtered samples for ``split``."""
    cfg = cfg or SceneConfig()
    cfg.validate()
    if count < 1:
        raise ValueError("count must be >= 1")
    stats = stats if stats is not None else GenStats()
    mix = list(cfg.mix)
    if "None" not in cfg.modifiers:
        mix = [mix[0], mix[1], 0.0]
        mix = [m / sum(mix) for m in mix]
    out: list[Sample] = []
    split_key = _SPLIT_KEYS.get(split, sum(split.encode()))
    n_blocks = (count + cfg.block_size - 1) // cfg.block_size
    for block in range(n_blocks):
        rng = np.random.default_rng(derive_seed(seed, split_key, block))
        n = min(cfg.block_size, count - block * cfg.block_size)
        strata = _block_strata(n, mix)
        strata = [strata[i] for i in rng.permutation(len(strata))]
        for j, stratum in enumerate(strata):
            idx = block * cfg.block_size + j
            out.append(_generate_one(rng, cfg, stratum, f"{split}-{idx:06d}", stats))
    return out


def _generate_one(rng, cfg: SceneConfig, stratum: str, sid: str, stats: GenStats) -> Sample:
    g = cfg.grid
    for _ in range(cfg.max_tries):
        stats.attempts += 1
        objects = _place_objects(rng, cfg)
        if objects is None:
            continue
        for _ in range(cfg.spec_draws):
            spec = _draw_spec(rng, objects, stratum, cfg)
            if spec is None:
                break
            targets = resolve_objects(spec, objects)
            if stratum_of(len(targets)) != stratum:
                continue
            if spec.modifier == "CountK" and len(targets) != spec.count:
                continue
            sample = Sample(
                id=sid, scene_id=sid, grid=render_grid(objects, g), objects=objects, spec=spec,
                instruction=vocab.encode(render(spec)),
                phrase=vocab.encode(canonical_phrase(spec)),
                masks=_masks_for(targets, g),
            )
            if cfg.noise_rate > 0 and rng.random() < cfg.noise_rate:
                sample = _corrupt(rng, sample, g)
            if cfg.apply_filter:
                ok, reason = filter_sample(sample, cfg.K)
                if not ok:
                    stats.rejected[reason] = stats.rejected.get(reason, 0) + 1
                    continue
            stats.accepted += 1
            return sample
    raise RuntimeError(f"could not generate a {stratum} sample within {cfg.max_tries} tries")


# ---------------------------------------------------------------------- io

def save_jsonl(path: str | Path, samples: list[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_jsonl(path: str | Path) -> list[Sample]:
    with open(path, encoding="utf-8") as fh:
        return [Sample.from_json(json.loads(line)) for line in fh if line.strip()]
