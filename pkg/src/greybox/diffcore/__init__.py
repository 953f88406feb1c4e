"""Dense float64 tensors with reverse-mode differentiation."""

from . import tensor as ops
from .gradcheck import finite_diff_grad, grad_agreement
from .nn import (ParamStore, conv2d, conv2d_forward, init_conv, init_mlp, mlp_apply,
                 mlp_forward)
from .optim import OptState, adam_step, adamw_step, exponential_lr
from .tensor import GradTape, Var, as_var, backward, constant, laplacian

__all__ = [
    "GradTape", "OptState", "ParamStore", "Var", "adam_step", "adamw_step", "as_var",
    "backward", "constant", "conv2d", "conv2d_forward", "exponential_lr",
    "finite_diff_grad", "init_conv", "init_mlp", "laplacian", "grad_agreement",
    "mlp_apply", "mlp_forward", "ops",
]
