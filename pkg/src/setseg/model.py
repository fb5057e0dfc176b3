"""Toy instruction-conditioned multi-instance segmenter.

A small decoder-only transformer reads [vision; instruction; phrase; trigger;
query bank] under the hybrid mask.  The hidden states at the K query
positions are projected into a mask decoder whose image features cross-attend
to the phrase tokens, refines the queries with two detector blocks, and
emits one mask grid and one presence score per slot.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layout as lay
from . import nn
from . import tensor as T
from . import vocab
from .params import ParamStore, load_tensors, save_tensors
from .tensor import Tensor

PIXEL_EMBEDDER = ("dec.pix.attr", "dec.pix.row", "dec.pix.col")


@dataclass
class ModelConfig:
    d: int = 64
    layers: int = 4
    heads: int = 4
    K: int = 10
    grid: int = 8
    d_dec: int = 64
    tau: float = 0.5
    dec_heads: int = 4
    ff_mult: int = 4
    attention: str = "hybrid"  # or "causal"
    query_bank: bool = True
    max_phrase: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.d % self.heads or self.d_dec % self.dec_heads:
            raise ValueError("model widths must divide by their head counts")
        if self.attention not in ("hybrid", "causal"):
            raise ValueError(f"unknown attention scheme {self.attention!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if min(self.d, self.layers, self.heads, self.grid, self.d_dec) < 1:
            raise ValueError("model dimensions must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def sinusoidal(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


@dataclass
class QueryEmbeddings:
    z: Tensor  # (B, K, d) raw hidden states at query slots
    z_proj: Tensor  # (B, K, d_dec)
    phrase: Tensor  # (B, T, d_dec) projected text-window states
    phrase_allow: np.ndarray | None = None  # (B, T) which of them are phrase/trigger tokens


@dataclass
class ForwardOutput:
    hidden: Tensor  # (B, L, d)
    layouts: list[lay.SequenceLayout]
    text_logits: Tensor  # (B, R, V): rows text_start .. L-2
    text_start: int
    masks: Tensor  # (B, K, G, G) probabilities
    scores: Tensor  # (B, K) presence probabilities
    queries: QueryEmbeddings


@dataclass
class PredictionSet:
    masks: np.ndarray  # (K, G, G) probabilities
    scores: np.ndarray  # (K,)
    tau: float
    phrase: list[int] = field(default_factory=list)

    @property
    def binary(self) -> np.ndarray:
        return self.masks >= 0.5

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.scores >= self.tau)

    def selected_masks(self) -> np.ndarray:
        return self.binary[self.selected]


class SetSegModel:
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg = cfg or ModelConfig()
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        ps = self.params = ParamStore()
        d, dd, V = cfg.d, cfg.d_dec, vocab.VOCAB_SIZE
        g = cfg.grid
        self.max_len = g * g + 64 + cfg.max_phrase + cfg.K + 2
        self.pos_table = sinusoidal(self.max_len, d)

        ps.add("llm.tok", rng.normal(0, 1.0, (V, d)))
        ps.add("llm.attr", rng.normal(0, 1.0, (vocab.N_ATTRS, d)))
        ps.add("llm.vispos", rng.normal(0, 0.5, (g * g, d)))
        if cfg.query_bank:
            ps.add("llm.query", rng.normal(0, 1.0, (cfg.K, d)))
        out_scale = 1.0 / math.sqrt(2 * cfg.layers)
        for i in range(cfg.layers):
            nn.init_norm(ps, f"llm.{i}.ln1", d)
            nn.init_attention(ps, f"llm.{i}.attn", d, d, d, rng)
            ps[f"llm.{i}.attn.o.w"].data *= out_scale
            nn.init_norm(ps, f"llm.{i}.ln2", d)
            nn.init_mlp(ps, f"llm.{i}.mlp", d, cfg.ff_mult * d, d, rng)
            ps[f"llm.{i}.mlp.fc2.w"].data *= out_scale
        nn.init_norm(ps, "llm.lnf", d)
        nn.init_linear(ps, "llm.head", d, V, rng)

        nn.init_mlp(ps, "dec.qproj", d, d, dd, rng)
        nn.init_mlp(ps, "dec.pproj", d, d, dd, rng)
        ps.add("dec.pix.attr", rng.normal(0, 1.0, (vocab.N_ATTRS, dd)))
        ps.add("dec.pix.row", rng.normal(0, 1.0, (g, dd)))
        ps.add("dec.pix.col", rng.normal(0, 1.0, (g, dd)))
        nn.init_norm(ps, "dec.fuse.lnx", dd)
        nn.init_norm(ps, "dec.fuse.lnc", dd)
        nn.init_attention(ps, "dec.fuse.xattn", dd, dd, dd, rng)
        nn.init_norm(ps, "dec.fuse.ln2", dd)
        nn.init_mlp(ps, "dec.fuse.mlp", dd, cfg.ff_mult * dd, dd, rng)
        for j in range(2):
            p = f"dec.det.{j}"
            nn.init_norm(ps, f"{p}.ln1", dd)
            nn.init_attention(ps, f"{p}.sattn", dd, dd, dd, rng)
            nn.init_norm(ps, f"{p}.ln2", dd)
            nn.init_norm(ps, f"{p}.lnpix", dd)
            nn.init_attention(ps, f"{p}.xattn", dd, dd, dd, rng)
            nn.init_norm(ps, f"{p}.ln3", dd)
            nn.init_mlp(ps, f"{p}.mlp", dd, cfg.ff_mult * dd, dd, rng)
        nn.init_norm(ps, "dec.lnq", dd)
        nn.init_norm(ps, "dec.lnpix", dd)
        nn.init_linear(ps, "dec.maskw", dd, dd, rng)
        nn.init_linear(ps, "dec.score", dd, 1, rng)

    # ------------------------------------------------------------ layouts

    def layout_for(self, instruction, phrase, mask_end: bool) -> lay.SequenceLayout:
        g = self.cfg.grid
        return lay.assemble(g * g, instruction, phrase, self.cfg.K, mask_end=mask_end)

    def attention_mask(self, layout: lay.SequenceLayout) -> np.ndarray:
        if self.cfg.attention == "causal" or not self.cfg.query_bank:
            return lay.build_causal_mask(layout)
        return lay.build_hybrid_mask(layout)

    # ------------------------------------------------------------ LLM part

    def _embed(self, grids: np.ndarray, token_rows: np.ndarray, n_query: int, mask_end: bool) -> Tensor:
        ps, cfg = self.params, self.cfg
        B = grids.shape[0]
        g2 = cfg.grid * cfg.grid
        parts = [T.embedding(ps["llm.attr"], grids.reshape(B, g2)) + ps["llm.vispos"],
                 T.embedding(ps["llm.tok"], token_rows)]
        if n_query:
            if cfg.query_bank:
                q = T.reshape(ps["llm.query"], (1, cfg.K, cfg.d))
                parts.append(T.concat([q] * B, axis=0) if B > 1 else q)
            else:
                parts.append(T.embedding(ps["llm.tok"], np.full((B, cfg.K), vocab.QUERY_ID)))
        if mask_end:
            parts.append(T.embedding(ps["llm.tok"], np.full((B, 1), vocab.MASK_END_ID)))
        x = T.concat(parts, axis=1)
        L = x.shape[1]
        if L > self.max_len:
            raise ValueError(f"sequence of length {L} exceeds the model maximum {self.max_len}")
        return x + self.pos_table[:L]

    def _block(self, i: int, x: Tensor, ctx_prefix: Tensor | None, allow: np.ndarray) -> tuple[Tensor, Tensor]:
        ps = self.params
        h = nn.norm(ps, f"llm.{i}.ln1", x)
        ctx = h if ctx_prefix is None else T.concat([ctx_prefix, h], axis=1)
        x = x + nn.attention(ps, f"llm.{i}.attn", h, ctx, self.cfg.heads, allow)
        return x + nn.mlp(ps, f"llm.{i}.mlp", nn.norm(ps, f"llm.{i}.ln2", x)), h

    def transformer(self, x: Tensor, allow: np.ndarray, split: int | None = None) -> Tensor:
        """Decoder stack.  With ``split`` the rows before it are computed on their own.

        Rows before ``split`` may only attend among themselves, so running
        them as a separate block changes nothing mathematically, and it makes
        their hidden states bit-identical to a run without the later rows
        (BLAS blocking otherwise depends on the total key count).
        """
        ps, cfg = self.params, self.cfg
        if split is None or split >= x.shape[1]:
            for i in range(cfg.layers):
                x, _ = self._block(i, x, None, allow)
            return nn.norm(ps, "llm.lnf", x)
        if allow[..., :split, split:].any():
            raise ValueError("prefix rows attend past the split point")
        a, b = x[:, :split], x[:, split:]
        allow_a, allow_b = allow[..., :split, :split], allow[..., split:, :]
        for i in range(cfg.layers):
            a_new, h_a = self._block(i, a, None, allow_a)
            b, _ = self._block(i, b, h_a, allow_b)
            a = a_new
        return T.concat([nn.norm(ps, "llm.lnf", a), nn.norm(ps, "llm.lnf", b)], axis=1)

    def text_hidden(self, grids, token_rows) -> Tensor:
        """Hidden states of the causal prefix alone (no query block)."""
        grids = np.asarray(grids)
        token_rows = np.asarray(token_rows)
        x = self._embed(grids, token_rows, 0, False)
        L = x.shape[1]
        return self.transformer(x, np.tril(np.ones((L, L), dtype=bool)))

    # ------------------------------------------------------------ forward

    def forward_batch(self, grids, instructions, phrases, mask_end: bool = True) -> ForwardOutput:
        """Joint forward over samples whose layouts share one length."""
        cfg, ps = self.cfg, self.params
        grids = np.asarray(grids, dtype=np.int64)
        B = grids.shape[0]
        layouts = [self.layout_for(ins, ph, mask_end) for ins, ph in zip(instructions, phrases)]
        L = layouts[0].length
        if any(l.length != L for l in layouts):
            raise ValueError("all samples in a batch need the same layout length")
        for ins, ph in zip(instructions, phrases):
            for t in list(ins) + list(ph):
                if not 0 <= t < vocab.VOCAB_SIZE:
                    raise IndexError(f"token id {t} out of vocabulary")
        token_rows = np.array([list(i) + list(p) + [vocab.TRIGGER_ID] for i, p in zip(instructions, phrases)],
                              dtype=np.int64)
        x = self._embed(grids, token_rows, cfg.K, mask_end)
        allow = np.stack([self.attention_mask(l) for l in layouts])
        H = self.transformer(x, allow, split=layouts[0].trigger_index + 1)

        g2 = cfg.grid * cfg.grid
        text_start = g2 - 1
        logits = nn.linear(ps, "llm.head", H[:, text_start:L - 1])

        t = layouts[0].trigger_index
        z = H[:, t + 1:t + 1 + cfg.K]
        # phrase tokens plus the trigger (so an empty phrase still leaves one key)
        keep = np.zeros((B, t + 1 - g2), dtype=bool)
        for b, l in enumerate(layouts):
            keep[b, l.positions(lay.Seg.PHRASE) - g2] = True
            keep[b, t - g2] = True
        tp = nn.mlp(ps, "dec.pproj", H[:, g2:t + 1])
        q = QueryEmbeddings(z, nn.mlp(ps, "dec.qproj", z), tp, keep)
        masks, scores = self.decode_masks(q, grids)
        return ForwardOutput(H, layouts, logits, text_start, masks, scores, q)

    def pixel_features(self, grids: np.ndarray) -> Tensor:
        ps, g = self.params, self.cfg.grid
        B = grids.shape[0]
        rows = np.repeat(np.arange(g), g)
        cols = np.tile(np.arange(g), g)
        base = T.embedding(ps["dec.pix.row"], rows) + T.embedding(ps["dec.pix.col"], cols)
        return T.embedding(ps["dec.pix.attr"], grids.reshape(B, g * g)) + base

    def decode_masks(self, q: QueryEmbeddings, grids: np.ndarray, pix: Tensor | None = None):
        """Fusion encoder, two detector blocks, then score and mask heads."""
        ps, cfg = self.params, self.cfg
        h = cfg.dec_heads
        pix = self.pixel_features(np.asarray(grids)) if pix is None else pix
        B, P, _ = pix.shape
        tp = nn.norm(ps, "dec.fuse.lnc", q.phrase)
        keep = np.ones(tp.shape[:2], dtype=bool) if q.phrase_allow is None else q.phrase_allow
        to_phrase = np.broadcast_to(keep[:, None, :], (B, P, keep.shape[1]))
        pix = pix + nn.attention(ps, "dec.fuse.xattn", nn.norm(ps, "dec.fuse.lnx", pix), tp, h, to_phrase)
        pix = pix + nn.mlp(ps, "dec.fuse.mlp", nn.norm(ps, "dec.fuse.ln2", pix))

        x = q.z_proj
        K = x.shape[1]
        full_q = np.ones((K, K), dtype=bool)
        full_p = np.ones((K, P), dtype=bool)
        for j in range(2):
            p = f"dec.det.{j}"
            hq = nn.norm(ps, f"{p}.ln1", x)
            x = x + nn.attention(ps, f"{p}.sattn", hq, hq, h, full_q)
            x = x + nn.attention(ps, f"{p}.xattn", nn.norm(ps, f"{p}.ln2", x),
                                 nn.norm(ps, f"{p}.lnpix", pix), h, full_p)
            x = x + nn.mlp(ps, f"{p}.mlp", nn.norm(ps, f"{p}.ln3", x))
        qo = nn.norm(ps, "dec.lnq", x)
        pf = nn.norm(ps, "dec.lnpix", pix)
        masks = self.segmentation_head(pf, qo)
        scores = T.sigmoid(T.reshape(nn.linear(ps, "dec.score", qo), (B, K)))
        g = cfg.grid
        return T.reshape(masks, (B, K, g, g)), scores

    def segmentation_head(self, pixel_feats: Tensor, queries: Tensor) -> Tensor:
        """sigmoid(<pixel feature, w(query)>) for every (query, cell) pair: (B, K, P)."""
        w = nn.linear(self.params, "dec.maskw", queries)
        logits = T.matmul(w, T.transpose(pixel_feats, (0, 2, 1)))
        return T.sigmoid(logits * (1.0 / math.sqrt(self.cfg.d_dec)))

    # ----------------------------------------------------------- inference

    def forward(self, sample, phrase=None, teacher_forcing: bool = True) -> ForwardOutput:
        phrase = list(sample.phrase if phrase is None else phrase)
        return self.forward_batch(sample.grid[None], [sample.instruction], [phrase], mask_end=teacher_forcing)

    def generate_phrase(self, grid: np.ndarray, instruction) -> list[int]:
        """Greedy decoding from the instruction end until the trigger or max length."""
        phrase: list[int] = []
        with T.no_grad():
            for _ in range(self.cfg.max_phrase):
                H = self.text_hidden(np.asarray(grid)[None], np.array([list(instruction) + phrase]))
                logits = nn.linear(self.params, "llm.head", H[:, -1]).data[0]
                nxt = int(np.argmax(logits))
                if nxt == vocab.TRIGGER_ID:
                    break
                phrase.append(nxt)
        return phrase

    def predict(self, sample, phrase_mode: str = "generated", tau: float | None = None) -> PredictionSet:
        if phrase_mode == "generated":
            phrase = self.generate_phrase(sample.grid, sample.instruction)
        elif phrase_mode == "dummy":
            phrase = [vocab.DUMMY_ID]
        elif phrase_mode == "gold":
            phrase = list(sample.phrase)
        else:
            raise ValueError(f"unknown phrase mode {phrase_mode!r}")
        with T.no_grad():
            out = self.forward(sample, phrase, teacher_forcing=False)
        return PredictionSet(out.masks.data[0].copy(), out.scores.data[0].copy(),
                             self.cfg.tau if tau is None else tau, phrase)

    # ------------------------------------------------------------ storage

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_tensors(directory / "params.bin", self.params.state())
        (directory / "config.json").write_text(self.cfg.to_json() + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "SetSegModel":
        directory = Path(directory)
        cfg = ModelConfig.from_dict(json.loads((directory / "config.json").read_text()))
        model = cls(cfg)
        model.params.load_state(load_tensors(directory / "params.bin"))
        return model


def extract_queries(hidden: Tensor, layout: lay.SequenceLayout) -> Tensor:
    """Rows trigger+1 .. trigger+K of a single (L, d) hidden-state matrix."""
    return hidden[layout.query_slice]
