"""Dense float64 tensors with reverse-mode differentiation, including the
reverse-over-reverse path used to differentiate a parameter gradient with
respect to input data."""
from . import kernels, ops
from .api import (
    FlatGradient,
    LayoutEntry,
    data_grad_of_match_loss,
    forward_loss,
    grad_check,
    joint_match_loss_and_grads,
    match_loss_and_data_grad,
    one_hot,
    param_grad,
    param_tensors,
)
from .record import ComputationRecord, record
from .tensor import Tensor, grad

__all__ = [
    "ComputationRecord",
    "FlatGradient",
    "LayoutEntry",
    "Tensor",
    "data_grad_of_match_loss",
    "forward_loss",
    "grad",
    "grad_check",
    "joint_match_loss_and_grads",
    "kernels",
    "match_loss_and_data_grad",
    "one_hot",
    "ops",
    "param_grad",
    "param_tensors",
    "record",
]
