"""Combined soft-Dice + cross-entropy training loss."""
from __future__ import annotations

import numpy as np

from useg.autograd import Tensor, constant, ops
from useg.errors import NonBinaryTarget, ShapeMismatch

DICE_EPS = 1e-5


def dice_ce_loss(logits: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """Mean pixel cross-entropy plus (1 - soft Dice) on the foreground channel.

    ``logits`` is (B, 2, H, W); ``target`` a (B, H, W) array of 0/1. The Dice
    term is computed per sample and averaged over the batch.
    """
    target = np.asarray(target)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeMismatch(f"logits must be (B, 2, H, W), got {logits.shape}")
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeMismatch(f"target shape {target.shape} does not match logits {logits.shape}")
    if not np.isin(target, (0, 1)).all():
        raise NonBinaryTarget("target mask must contain only 0 and 1")

    dtype = logits.dtype
    g = target.astype(dtype)
    onehot = constant(np.stack([1.0 - g, g], axis=1).astype(dtype))
    logp = ops.log_softmax(logits, axis=1)
    ce = -ops.mean(ops.sum_(logp * onehot, axis=1))

    select_fg = constant(np.array([0.0, 1.0], dtype=dtype).reshape(1, 2, 1, 1))
    p = ops.sum_(ops.exp(logp) * select_fg, axis=1)
    inter = ops.sum_(p * constant(g), axis=(1, 2))
    denom = ops.sum_(p, axis=(1, 2)) + constant(g.sum(axis=(1, 2)) + eps)
    dice = (inter * 2.0 + eps) / denom
    return ce + (1.0 - ops.mean(dice))
