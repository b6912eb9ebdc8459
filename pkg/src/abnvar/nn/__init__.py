from .tensor import (
    ContractError,
    NonFiniteError,
    Tensor,
    as_tensor,
    check_finite,
    clamp,
    concat,
    exp,
    log,
    log_softmax,
    no_grad,
    parameter,
    relu,
    sigmoid,
    softmax,
    softmax_array,
    stack,
    tanh,
)
from .functional import (
    batchnorm,
    conv2d,
    dense,
    global_avg_pool,
    global_max_pool,
    lstm_cell,
    lstm_recurrent,
)
from .layers import BatchNorm, Conv2d, Dense, LSTMCell, Module
from .gradcheck import GradCheckReport, gradient_check, gradient_check_report, relative_error

__all__ = [
    "BatchNorm", "Conv2d", "ContractError", "Dense", "LSTMCell", "Module",
    "NonFiniteError", "Tensor", "as_tensor", "check_finite", "batchnorm", "clamp", "concat",
    "conv2d", "dense", "exp", "global_avg_pool", "global_max_pool",
    "GradCheckReport", "gradient_check", "gradient_check_report", "log", "log_softmax", "lstm_cell", "no_grad",
    "parameter", "relative_error", "relu", "sigmoid", "softmax",
    "softmax_array", "stack", "tanh",
]
