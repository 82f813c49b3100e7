from . import ops
from .gradcheck import ContractError, grad_check
from .nn import Conv2d, LayerNorm, Linear, Module
from .optim import OptimizerState, TrainingError, adam_step
from .tensor import DimensionError, NumericsError, Parameter, Tensor, checked, is_checked, no_grad

__all__ = [
    "ops",
    "grad_check",
    "ContractError",
    "Module",
    "Linear",
    "Conv2d",
    "LayerNorm",
    "OptimizerState",
    "TrainingError",
    "adam_step",
    "DimensionError",
    "NumericsError",
    "Parameter",
    "Tensor",
    "checked",
    "is_checked",
    "no_grad",
]
