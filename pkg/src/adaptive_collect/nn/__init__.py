"""Small numpy substrate: dense/LSTM layers, BPTT, Adam, gradient checks."""

from .checkpoint import load_params, save_params
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    LstmStack,
    Params,
    backward_sequence,
    check_finite,
    copy_params,
    dense_backward,
    dense_forward,
    forward_sequence,
    init_dense,
    init_lstm,
    lstm_step,
    lstm_step_backward,
    sigmoid,
    sub,
    zeros_like,
)
from .optim import AdamState, adam_update, clip_grad_norm

__all__ = [
    "AdamState",
    "GradCheckReport",
    "LstmStack",
    "Params",
    "adam_update",
    "backward_sequence",
    "check_finite",
    "clip_grad_norm",
    "copy_params",
    "dense_backward",
    "dense_forward",
    "forward_sequence",
    "grad_check",
    "init_dense",
    "init_lstm",
    "load_params",
    "lstm_step",
    "lstm_step_backward",
    "save_params",
    "sigmoid",
    "sub",
    "zeros_like",
]
