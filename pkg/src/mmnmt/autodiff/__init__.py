"""Minimal reverse-mode automatic differentiation over numpy arrays."""
from .core import DEFAULT_DTYPE, Parameter, ShapeError, Tape, Tensor, active_tape, backward, no_record
from .gradcheck import GradCheckResult, grad_check, numeric_grad, relative_error
from .init import child_rng, dropout_mask, init_gaussian, init_orthogonal, init_zero, make_rng
from . import ops

__all__ = [
    "DEFAULT_DTYPE", "GradCheckResult", "Parameter", "ShapeError", "Tape", "Tensor",
    "active_tape", "backward", "child_rng", "dropout_mask", "grad_check", "init_gaussian",
    "init_orthogonal", "init_zero", "make_rng", "no_record", "numeric_grad", "ops",
    "relative_error",
]
