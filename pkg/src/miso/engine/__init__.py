from . import tensor as ops
from .gradcheck import GradCheckReport, grad_check, relative_error
from .optim import Adam, AdamMoments, adam_step
from .tensor import (
    BACKWARD_RULES,
    DomainError,
    EngineError,
    GradientError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    backward,
    no_grad,
    zero_grad,
)

__all__ = [
    "ops", "GradCheckReport", "grad_check", "relative_error", "Adam", "AdamMoments",
    "adam_step", "BACKWARD_RULES", "DomainError", "EngineError", "GradientError",
    "NonFiniteError", "ShapeError", "Tape", "Tensor", "active_tape", "as_tensor",
    "backward", "no_grad", "zero_grad",
]
