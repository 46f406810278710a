"""Numerical kernel: tensors, MLP and LSTM forward/backward, optimizers, RNG."""

from . import backend
from .lstm import init_lstm_blocks, lstm_backward, lstm_cell, lstm_forward, lstm_layout
from .mlp import (MlpModel, forward, init_mlp, log_softmax, loss_and_grad, mlp_layout,
                  predict, softmax)
from .optim import AdamState, adam_step, sgd_step
from .rng import RngStream, as_generator
from .tensor import ParameterVector, grad_l2_norm, tensor2

__all__ = [
    "AdamState", "MlpModel", "ParameterVector", "RngStream", "adam_step", "as_generator",
    "backend", "forward", "grad_l2_norm", "init_lstm_blocks", "init_mlp", "log_softmax",
    "loss_and_grad", "lstm_backward", "lstm_cell", "lstm_forward", "lstm_layout", "mlp_layout",
    "predict", "sgd_step", "softmax", "tensor2",
]
