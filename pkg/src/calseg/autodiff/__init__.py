"""
Minimal reverse-mode automatic differentiation on numpy arrays.
"""

from . import functional
from .gradcheck import OPERATOR_CASES, gradcheck, numerical_grad, operator_suite, relative_error
from .tensor import (
    GradientTape,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    no_grad,
)

__all__ = [
    "OPERATOR_CASES",
    "GradientTape",
    "Tensor",
    "backward",
    "default_dtype",
    "functional",
    "get_default_dtype",
    "gradcheck",
    "no_grad",
    "numerical_grad",
    "operator_suite",
    "relative_error",
]
