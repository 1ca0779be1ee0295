from . import functional
from .gradcheck import GradCheckResult, check_gradients
from .io import load_tensor, load_tensors, save_tensor, save_tensors
from .nn import BatchNorm, Conv2d, Dropout, LayerNorm, Linear, Module
from .optim import Adam, adam_step
from .tensor import Parameter, Tensor, concat, no_grad

__all__ = [
    "Adam", "BatchNorm", "Conv2d", "Dropout", "GradCheckResult", "LayerNorm", "Linear", "Module",
    "Parameter", "Tensor", "adam_step", "check_gradients", "concat", "functional", "load_tensor",
    "load_tensors", "no_grad", "save_tensor", "save_tensors",
]
