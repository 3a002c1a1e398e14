from nerp.neural import functional
from nerp.neural.checkpoint import read_checkpoint, restore_params, save_checkpoint
from nerp.neural.layers import MLP, Linear, Module
from nerp.neural.optim import Adagrad, adagrad_step
from nerp.neural.tensor import Param, Tensor, detect_anomaly, no_grad

__all__ = [
    "functional",
    "Adagrad",
    "adagrad_step",
    "detect_anomaly",
    "Linear",
    "MLP",
    "Module",
    "no_grad",
    "Param",
    "read_checkpoint",
    "restore_params",
    "save_checkpoint",
    "Tensor",
]
