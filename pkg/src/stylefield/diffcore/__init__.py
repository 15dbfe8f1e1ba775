"""Reverse-mode autodiff over dense numpy tensors, Adam, and gradient checks."""

from .tensor import (
    DiffcoreError,
    ShapeError,
    Tensor,
    ParamSet,
    tensor,
    constant,
    parameter,
    evaluate,
    backward,
    no_grad,
    set_default_dtype,
    default_dtype,
)
from . import ops
from .adam import AdamState, adam_step
from .gradcheck import FDReport, finite_diff_check
from .tensorfile import TensorFileError, save_f32t, load_f32t

__all__ = [
    "DiffcoreError",
    "ShapeError",
    "Tensor",
    "ParamSet",
    "tensor",
    "constant",
    "parameter",
    "evaluate",
    "backward",
    "no_grad",
    "set_default_dtype",
    "default_dtype",
    "ops",
    "AdamState",
    "adam_step",
    "FDReport",
    "finite_diff_check",
    "TensorFileError",
    "save_f32t",
    "load_f32t",
]
