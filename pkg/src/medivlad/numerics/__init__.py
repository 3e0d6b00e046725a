from .tensor import (
    EPS,
    GraphError,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat,
    default_dtype,
    div,
    exp,
    gelu,
    getitem,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    max_,
    mean,
    mul,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    softmax,
    stack,
    strict,
    sub,
    sum_,
    tanh,
    tensor,
    transpose,
)
from .nn import LayerNorm, Linear, Module, trunc_normal
from .optim import AdamW, cosine_schedule, decay_mask, linear_schedule
from .gradcheck import grad_check

__all__ = [name for name in dir() if not name.startswith("_")]
