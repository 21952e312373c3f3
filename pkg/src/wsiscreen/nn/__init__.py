"""Small differentiable numeric core: layers, losses, optimizers, gradient checking."""

from .checkpoint import load_params, save_params
from .gradcheck import GradCheckReport, grad_check, numeric_gradient
from .layers import (
    LinearParams,
    activation,
    activation_backward,
    linear_backward,
    linear_forward,
    sigmoid,
    softmax_rows,
)
from .losses import BCE_EPS, adjacent_pairing, bce_loss, info_nce_loss
from .optim import (
    OptimizerState,
    adam_state,
    adam_step,
    cosine_anneal,
    optimizer_step,
    sgd_momentum_step,
    sgd_state,
)

__all__ = [
    "BCE_EPS",
    "GradCheckReport",
    "LinearParams",
    "OptimizerState",
    "activation",
    "activation_backward",
    "adam_state",
    "adam_step",
    "adjacent_pairing",
    "bce_loss",
    "cosine_anneal",
    "grad_check",
    "info_nce_loss",
    "linear_backward",
    "linear_forward",
    "load_params",
    "numeric_gradient",
    "optimizer_step",
    "save_params",
    "sgd_momentum_step",
    "sgd_state",
    "sigmoid",
    "softmax_rows",
]
