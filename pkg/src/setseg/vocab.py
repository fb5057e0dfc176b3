"""Fixed token vocabulary and cell-attribute alphabet."""

from __future__ import annotations

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle")
PLURAL = {"square": "squares", "circle": "circles", "triangle": "triangles", "shape": "shapes"}

DUMMY = "<dummy>"
TRIGGER = "<mask_start>"
MASK_END = "<mask_end>"
QUERY = "<seg>"

TOKENS: tuple[str, ...] = (
    DUMMY, TRIGGER, MASK_END, QUERY,
    *COLORS,
    "square", "squares", "circle", "circles", "triangle", "triangles", "shape", "shapes",
    "segment", "find", "highlight", "all", "every", "the", "leftmost", "rightmost",
    "largest", "two", "three", "except", "ones", "of", "and", "not",
)

TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}
DUMMY_ID = TOKEN_ID[DUMMY]
TRIGGER_ID = TOKEN_ID[TRIGGER]
MASK_END_ID = TOKEN_ID[MASK_END]
QUERY_ID = TOKEN_ID[QUERY]
VOCAB_SIZE = len(TOKENS)

# cell attribute ids: 0 is empty, then one id per (shape, color)
N_ATTRS = 1 + len(SHAPES) * len(COLORS)


def attr_id(shape: str, color: str) -> int:
    return 1 + SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def attr_parts(aid: int) -> tuple[str, str] | None:
    if aid == 0:
        return None
    s, c = divmod(aid - 1, len(COLORS))
    return SHAPES[s], COLORS[c]


def encode(words: list[str] | str) -> list[int]:
    if isinstance(words, str):
        words = words.split()
    try:
        return [TOKEN_ID[w] for w in words]
    except KeyError as exc:
        raise ValueError(f"unknown word {exc.args[0]!r}") from None


def decode(ids: list[int]) -> list[str]:
    return [TOKENS[i] for i in ids]


def as_json() -> dict:
    return {"tokens": list(TOKENS), "ids": TOKEN_ID, "n_attrs": N_ATTRS}
