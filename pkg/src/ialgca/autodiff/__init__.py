from . import ops
from .gradcheck import finite_diff_gradient, gradient_error, max_rel_error
from .ops import apply_primitive
from .tensor import Parameter, Tape, Tensor, backward, sgd_step

__all__ = [
    "Parameter",
    "Tape",
    "Tensor",
    "apply_primitive",
    "backward",
    "finite_diff_gradient",
    "gradient_error",
    "max_rel_error",
    "ops",
    "sgd_step",
]
