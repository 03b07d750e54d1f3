"""Tensor substrate: autodiff tape, operators, parameters and optimiser."""
from useg.autograd.tensor import OPS, Op, Tensor, apply_op, backward, constant, no_grad, register
from useg.autograd import ops
from useg.autograd.scan import scan
from useg.autograd.params import (
    ParameterStore,
    fan_in_uniform,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from useg.autograd.optim import AdamWState, CosineSchedule, adamw_step, cosine_lr

__all__ = [
    "OPS", "Op", "Tensor", "apply_op", "backward", "constant", "no_grad", "register", "ops", "scan",
    "ParameterStore", "fan_in_uniform", "load_checkpoint", "read_checkpoint", "save_checkpoint",
    "AdamWState", "CosineSchedule", "adamw_step", "cosine_lr",
]
