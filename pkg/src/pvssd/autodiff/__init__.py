from . import functional
from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .nn import Conv2d, Deconv2d, LayerNorm, Linear, Module, parameter
from .optim import Adam, one_cycle
from .tensor import ShapeError, Tensor, backward, no_grad, topological_order

__all__ = [
    "functional", "apply_checkpoint", "load_checkpoint", "save_checkpoint", "grad_check",
    "Conv2d", "Deconv2d", "LayerNorm", "Linear", "Module", "parameter", "Adam", "one_cycle",
    "ShapeError", "Tensor", "backward", "no_grad", "topological_order",
]
