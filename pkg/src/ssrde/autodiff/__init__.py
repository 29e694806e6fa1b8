from . import ops
from .gradcheck import GradCheckReport, NondeterministicError, finite_diff_check
from .nn import Conv2d, ConvTranspose2d, Module, PReLU, parameter
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    build_tape,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "ops",
    "Tensor",
    "as_tensor",
    "backward",
    "build_tape",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "is_grad_enabled",
    "no_grad",
    "Module",
    "Conv2d",
    "ConvTranspose2d",
    "PReLU",
    "parameter",
    "finite_diff_check",
    "GradCheckReport",
    "NondeterministicError",
]
