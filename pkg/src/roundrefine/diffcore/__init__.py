"""Reverse-mode differentiable numerics used by the model."""

from .params import (
    CheckpointError,
    ParamStore,
    clip_grad_norm,
    cosine_schedule,
    optimizer_step,
    read_checkpoint,
    save_checkpoint,
)
from .tensor import (
    GraphError,
    ShapeError,
    Tensor,
    add,
    backward,
    bce_loss,
    concat,
    cross_attention,
    dense,
    dropout,
    embedding,
    exp,
    gelu,
    grad_enabled,
    index,
    layernorm,
    log,
    matmul,
    mean_pool,
    mul,
    no_grad,
    ntp_loss,
    reshape,
    set_finite_checks,
    sigmoid,
    softmax,
    tmean,
    transpose,
    tsum,
)
from .gradcheck import GradCheckResult, check_gradients
