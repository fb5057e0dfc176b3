"""Layer helpers built on :mod:`setseg.tensor`, parameterised through a ParamStore."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import Tensor


def init_linear(ps: ParamStore, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                bias: bool = True, scale: float = 1.0) -> None:
    ps.add(f"{name}.w", rng.normal(0.0, scale / math.sqrt(d_in), size=(d_in, d_out)))
    if bias:
        ps.add(f"{name}.b", np.zeros(d_out))


def linear(ps: ParamStore, name: str, x: Tensor) -> Tensor:
    y = x @ ps[f"{name}.w"]
    b = f"{name}.b"
    return y + ps[b] if b in ps else y


def init_norm(ps: ParamStore, name: str, d: int) -> None:
    ps.add(f"{name}.g", np.ones(d))
    ps.add(f"{name}.b", np.zeros(d))


def norm(ps: ParamStore, name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, ps[f"{name}.g"], ps[f"{name}.b"])


def init_mlp(ps: ParamStore, name: str, d_in: int, d_hidden: int, d_out: int, rng) -> None:
    init_linear(ps, f"{name}.fc1", d_in, d_hidden, rng)
    init_linear(ps, f"{name}.fc2", d_hidden, d_out, rng)


def mlp(ps: ParamStore, name: str, x: Tensor) -> Tensor:
    return linear(ps, f"{name}.fc2", T.gelu(linear(ps, f"{name}.fc1", x)))


def init_attention(ps: ParamStore, name: str, d_q: int, d_kv: int, d: int, rng) -> None:
    init_linear(ps, f"{name}.q", d_q, d, rng)
    init_linear(ps, f"{name}.k", d_kv, d, rng)
    init_linear(ps, f"{name}.v", d_kv, d, rng)
    init_linear(ps, f"{name}.o", d, d_q, rng)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    nd = len(lead)
    return T.transpose(x, (*range(nd), nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = len(lead)
    x = T.transpose(x, (*range(nd), nd + 1, nd, nd + 2))
    return T.reshape(x, (*lead, n, h * dh))


def attention(ps: ParamStore, name: str, x: Tensor, ctx: Tensor, heads: int, allow: np.ndarray) -> Tensor:
    """Multi-head attention of ``x`` rows over ``ctx`` rows.

    ``allow`` is (Lq, Lk) or (B, Lq, Lk) and is broadcast over heads.
    """
    q = _split_heads(linear(ps, f"{name}.q", x), heads)
    k = _split_heads(linear(ps, f"{name}.k", ctx), heads)
    v = _split_heads(linear(ps, f"{name}.v", ctx), heads)
    allow = np.asarray(allow, dtype=bool)
    if allow.ndim == 3:
        allow = allow[:, None]
    out = T.masked_attention(q, k, v, allow)
    return linear(ps, f"{name}.o", _merge_heads(out))
