from .engine import Parameter, Tape, Tensor, active_tape, as_tensor
from .gradcheck import grad_check
from .optim import Adam, GradientError
from .ops import (
    InvalidDistributionError,
    ShapeError,
    avg_pool,
    concat,
    conv1d,
    conv1x1,
    conv2d,
    cross_entropy,
    dense,
    elu,
    global_avg_pool,
    reshape,
    softmax,
    sum_all,
    upsample_nearest,
    weighted_sum,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "CheckpointError",
    "GradientError",
    "InvalidDistributionError",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "avg_pool",
    "concat",
    "conv1d",
    "conv1x1",
    "conv2d",
    "cross_entropy",
    "dense",
    "elu",
    "global_avg_pool",
    "grad_check",
    "load_checkpoint",
    "reshape",
    "save_checkpoint",
    "softmax",
    "sum_all",
    "upsample_nearest",
    "weighted_sum",
]
