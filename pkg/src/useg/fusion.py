"""Lang Fusion: project the pooled text vector to a decoder stage's width and
combine it with that stage's feature map."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from useg.autograd import ParameterStore, Tensor, ops
from useg.errors import InvalidConfig, ModeNone, ShapeMismatch

FUSION_MODES = ("none", "stage_add", "stage_gate", "tail")
N_STAGES = 5


def check_mode(mode: str) -> str:
    if mode not in FUSION_MODES:
        raise InvalidConfig(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    return mode


def fused_stages(mode: str):
    """1-based decoder stages that receive text for ``mode``."""
    check_mode(mode)
    if mode == "none":
        return ()
    if mode == "tail":
        return (N_STAGES,)
    return tuple(range(1, N_STAGES + 1))


def init_fusion_params(store: ParameterStore, stage_widths, text_dim: int, mode: str, prefix: str = "fusion") -> None:
    """Zero-initialised projections so a fresh fused model equals the image-only one."""
    for s in fused_stages(mode):
        c = stage_widths[s - 1]
        store.add(f"{prefix}.stage{s}.w", np.zeros((c, text_dim)))
        store.add(f"{prefix}.stage{s}.b", np.zeros(c))


def project(t: Tensor, w: Mapping[str, Tensor]) -> Tensor:
    """W t + b for a batch of text vectors, shape (B, C)."""
    return ops.matmul(t, ops.transpose(w["w"], (1, 0))) + w["b"]


def fuse_stage(fmap: Tensor, t: Tensor, w: Mapping[str, Tensor], mode: str) -> Tensor:
    check_mode(mode)
    if mode == "none":
        raise ModeNone("fusion mode 'none' has no fusion step; skip the call")
    c = fmap.shape[1]
    if w["w"].shape[0] != c:
        raise ShapeMismatch(f"projection produces {w['w'].shape[0]} channels, feature map has {c}")
    if t.ndim != 2 or t.shape[1] != w["w"].shape[1] or t.shape[0] != fmap.shape[0]:
        raise ShapeMismatch(f"text batch {t.shape} incompatible with projection {w['w'].shape} / map {fmap.shape}")
    proj = ops.reshape(project(t, w), (fmap.shape[0], c, 1, 1))
    if mode == "stage_gate":
        return fmap * ops.sigmoid(proj)
    return fmap + proj
