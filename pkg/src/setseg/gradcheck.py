"""Finite-difference verification of the full training objective."""

from __future__ import annotations

import numpy as np

from . import vocab
from .losses import presence_loss, response_target, seg_loss, text_loss, total_loss
from .matching import LossWeights, build_cost, hungarian, presence_targets
from .model import SetSegModel, ModelConfig
from .params import GradCheckReport, grad_check


def random_instance(cfg: ModelConfig, seed: int, n_targets: int = 2):
    rng = np.random.default_rng(seed)
    g = cfg.grid
    grid = rng.integers(0, vocab.N_ATTRS, size=(g, g))
    instruction = list(rng.integers(4, vocab.VOCAB_SIZE, size=3))
    phrase = list(rng.integers(4, vocab.VOCAB_SIZE, size=2))
    gts = rng.random((n_targets, g, g)) < 0.4
    gts[:, 0, 0] = True
    return grid, instruction, phrase, gts


def full_loss_fn(model: SetSegModel, grid, instruction, phrase, gts, weights: LossWeights):
    """Closure over the total loss; the assignment is computed once and then held fixed."""
    K = model.cfg.K
    out = model.forward_batch(grid[None], [instruction], [phrase])
    assign = hungarian(build_cost(out.masks.data[0], out.scores.data[0], gts, weights))
    targets = presence_targets(assign, K)
    r0, tt = response_target(instruction, phrase, K)

    def f():
        o = model.forward_batch(grid[None], [instruction], [phrase])
        lt = text_loss(o.text_logits[0, r0:r0 + len(tt.targets)], tt)
        ls = seg_loss(o.masks[0], gts, assign, weights)
        lp = presence_loss(o.scores[0], targets)
        return total_loss(lt, ls, lp, weights)[0]

    return f, assign


def full_loss_check(cfg: ModelConfig, weights: LossWeights, seed: int, tolerance: float = 1e-4) -> GradCheckReport:
    model = SetSegModel(cfg)
    grid, instruction, phrase, gts = random_instance(cfg, seed)
    f, _ = full_loss_fn(model, grid, instruction, phrase, gts, weights)
    return grad_check(f, model.params, tolerance=tolerance)
