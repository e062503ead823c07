from . import checkpoint
from .layers import bigru, conv1d, dense, gelu, gru, masked_dense
from .optim import ParamStore, SchedulerState, adamw_step, plateau_step
from .tensor import BackwardReport, DiffArray, as_diff, no_grad, parameter

__all__ = [
    "BackwardReport",
    "DiffArray",
    "ParamStore",
    "SchedulerState",
    "adamw_step",
    "as_diff",
    "bigru",
    "checkpoint",
    "conv1d",
    "dense",
    "gelu",
    "gru",
    "masked_dense",
    "no_grad",
    "parameter",
    "plateau_step",
]
