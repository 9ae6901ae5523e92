"""Minimal float32 autodiff substrate: tensors, modules, grad checking, checkpoints."""

from .checkpoint import CheckpointError, load_tensors, save_tensors
from .gradcheck import GradCheckError, GradCheckReport, grad_check
from .nn import (
    Attention,
    BatchNorm,
    Block,
    LayerNorm,
    Linear,
    Mlp,
    Module,
    ModuleList,
    Parameter,
)
from .tensor import (
    DTYPE,
    DimensionError,
    Tensor,
    add,
    as_tensor,
    concat,
    debug_mode,
    div,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    make_op,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
)
