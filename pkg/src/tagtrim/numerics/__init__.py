from .backend import HAVE_COMPILED, active_backend
from .ops import cross_entropy, finite_diff_grad, gelu, layer_norm, softmax_row
from .tensor import GradientTape, Tensor

__all__ = [
    "GradientTape",
    "Tensor",
    "HAVE_COMPILED",
    "active_backend",
    "cross_entropy",
    "finite_diff_grad",
    "gelu",
    "layer_norm",
    "softmax_row",
]
