from .autodiff import ExprGraph, Node, ShapeError, backward, evaluate, grad
from .checkpoint import CheckpointError, load_params, save_params
from .optim import (
    AdamState,
    adam_step,
    clip_by_global_norm,
    finite_difference_gradient,
    global_norm,
    init_linear,
    relative_error,
)

__all__ = [
    "ExprGraph",
    "Node",
    "ShapeError",
    "backward",
    "evaluate",
    "grad",
    "CheckpointError",
    "load_params",
    "save_params",
    "AdamState",
    "adam_step",
    "clip_by_global_norm",
    "finite_difference_gradient",
    "global_norm",
    "init_linear",
    "relative_error",
]
