from .tensor import (
    DimensionError,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    scaled_dot_attention,
    softmax,
    where,
)
from .conv import conv2d, conv2d_transpose
from .gradcheck import GradcheckReport, gradcheck
from .optim import AdamW, TrainingError

__all__ = [
    "Tensor",
    "DimensionError",
    "as_tensor",
    "concat",
    "where",
    "broadcast_to",
    "softmax",
    "scaled_dot_attention",
    "layer_norm",
    "gelu",
    "conv2d",
    "conv2d_transpose",
    "gradcheck",
    "GradcheckReport",
    "AdamW",
    "TrainingError",
]
