"""Minimal reverse-mode autodiff over numpy arrays."""

from . import ops
from .gradcheck import GradcheckReport, gradcheck
from .tensor import (
    REGISTRY,
    NonFiniteError,
    Primitive,
    ShapeError,
    Tensor,
    apply,
    backward,
    force_eval,
    no_grad,
    op_set,
    parameter,
    register,
)

__all__ = [
    "REGISTRY",
    "GradcheckReport",
    "NonFiniteError",
    "Primitive",
    "ShapeError",
    "Tensor",
    "apply",
    "backward",
    "force_eval",
    "gradcheck",
    "no_grad",
    "op_set",
    "ops",
    "parameter",
    "register",
]
