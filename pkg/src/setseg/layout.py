"""Multimodal sequence assembly and attention masks.

The sequence order is vision, instruction text, phrase, trigger, query bank
and (in teacher-forced training only) a closing mask-end token.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Seg(enum.IntEnum):
    VISION = 0
    TEXT = 1
    PHRASE = 2
    TRIGGER = 3
    QUERY = 4
    MASK_END = 5


@dataclass(frozen=True)
class SequenceLayout:
    labels: tuple[Seg, ...]

    def __post_init__(self):
        labels = self.labels
        triggers = [i for i, s in enumerate(labels) if s == Seg.TRIGGER]
        queries = [i for i, s in enumerate(labels) if s == Seg.QUERY]
        if queries:
            if len(triggers) != 1:
                raise ValueError("a layout with queries needs exactly one trigger")
            t = triggers[0]
            if queries != list(range(t + 1, t + 1 + len(queries))):
                raise ValueError("queries must form one block right after the trigger")

    @property
    def length(self) -> int:
        return len(self.labels)

    @property
    def K(self) -> int:
        return sum(1 for s in self.labels if s == Seg.QUERY)

    @property
    def trigger_index(self) -> int:
        return self.labels.index(Seg.TRIGGER)

    @property
    def query_slice(self) -> slice:
        t = self.trigger_index
        return slice(t + 1, t + 1 + self.K)

    def positions(self, *segs: Seg) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.labels) if s in segs], dtype=np.int64)

    def label_array(self) -> np.ndarray:
        return np.array([int(s) for s in self.labels], dtype=np.int64)


def assemble(vision_len: int, text_tokens, phrase_tokens, K: int, mask_end: bool | None = None) -> SequenceLayout:
    """Lay out [vision; text; phrase; trigger; q_1..q_K; (mask_end)].

    ``mask_end`` defaults to on whenever a phrase is present, which is the
    teacher-forced training form.
    """
    if K < 1:
        raise ValueError("query count K must be at least 1")
    if vision_len < 1:
        raise ValueError("vision_len must be at least 1")
    if len(text_tokens) == 0:
        raise ValueError("instruction text must be nonempty")
    if mask_end is None:
        mask_end = len(phrase_tokens) > 0
    labels = ([Seg.VISION] * vision_len + [Seg.TEXT] * len(text_tokens)
              + [Seg.PHRASE] * len(phrase_tokens) + [Seg.TRIGGER] + [Seg.QUERY] * K)
    if mask_end:
        labels.append(Seg.MASK_END)
    return SequenceLayout(tuple(labels))


def build_causal_mask(layout: SequenceLayout) -> np.ndarray:
    n = layout.length
    return np.tril(np.ones((n, n), dtype=bool))


def build_hybrid_mask(layout: SequenceLayout) -> np.ndarray:
    """Causal rows everywhere except query rows, which see every
    vision/text/phrase/trigger/query position and nothing after the bank."""
    allow = build_causal_mask(layout)
    q = layout.positions(Seg.QUERY)
    if q.size:
        context = layout.label_array() != Seg.MASK_END
        allow[q] = context[None, :]
    return allow


def mask_to_text(allow: np.ndarray) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in allow) + "\n"


def mask_from_text(text: str) -> np.ndarray:
    rows = [line for line in text.splitlines() if line]
    return np.array([[ch == "1" for ch in row] for row in rows], dtype=bool)
