"""AdamW with decoupled weight decay and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from useg.autograd.params import ParameterStore
from useg.errors import MissingGrad, ShapeMismatch, StepOutOfRange


@dataclass(frozen=True)
class CosineSchedule:
    total_steps: int
    lr_max: float = 5e-3
    lr_min: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise StepOutOfRange(f"total_steps must be >= 1, got {self.total_steps}")


def cosine_lr(step: int, sched: CosineSchedule) -> float:
    """Learning rate at ``step`` for 0 <= step <= total_steps."""
    if not 0 <= step <= sched.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {sched.total_steps}]")
    cos = math.cos(math.pi * step / sched.total_steps)
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + cos)


@dataclass
class AdamWState:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(store: ParameterStore, grads: Mapping[str, np.ndarray], state: AdamWState) -> None:
    """One in-place AdamW update of every parameter in ``store``.

    Weight decay is applied to the parameter directly (p -= lr*wd*p) and kept
    out of the moment estimates.
    """
    for name, p in store.items():
        if name not in grads or grads[name] is None:
            raise MissingGrad(f"no gradient for parameter {name!r}")
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {grads[name].shape}, parameter {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ShapeMismatch(f"optimizer state for {name!r} does not match parameter shape")

    state.t += 1
    b1, b2, lr = state.beta1, state.beta2, state.lr
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in store.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
