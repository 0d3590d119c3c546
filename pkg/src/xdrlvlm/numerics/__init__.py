from .gradcheck import GradCheckResult, check_gradients, rel_error
from .optim import AdamW, OptimizerState, adamw_step, clip_grads, cosine_lr, global_grad_norm
from .tensor import (
    ComputeGraph,
    DimensionError,
    Tensor,
    backward,
    bce_with_logits,
    concat,
    cross_entropy,
    embedding,
    exp,
    gelu,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    tanh,
    trace,
    transpose,
    tsum,
    zero_grad,
)
from .weights_io import WeightFileError, decode_weights, encode_weights, load_weights, save_weights
