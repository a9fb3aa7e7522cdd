from .optim import RADAM, SGD, OptimizerState, radam_step, rectification, sgd_step, step
from .tensor import (
    ContractError,
    DimensionError,
    GradientTape,
    NonFiniteError,
    Tensor,
    add,
    backward,
    clamp_min,
    concat,
    div,
    exp,
    log,
    log_softmax,
    matmul,
    mul,
    neg,
    relu,
    reshape,
    sqrt,
    square,
    sub,
    tanh,
    tensor,
    tmean,
    tsum,
)
from .nn import group_norm, linear, row_norm, cosine_similarity

__all__ = [
    "RADAM",
    "SGD",
    "OptimizerState",
    "radam_step",
    "rectification",
    "sgd_step",
    "step",
    "ContractError",
    "DimensionError",
    "GradientTape",
    "NonFiniteError",
    "Tensor",
    "add",
    "backward",
    "clamp_min",
    "concat",
    "div",
    "exp",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "neg",
    "relu",
    "reshape",
    "sqrt",
    "square",
    "sub",
    "tanh",
    "tensor",
    "tmean",
    "tsum",
    "group_norm",
    "linear",
    "row_norm",
    "cosine_similarity",
    "grad",
]


def grad(fn, arrays):
    """Evaluate ``fn(*tensors)`` and return (value, [gradient per array])."""
    with GradientTape() as tape:
        leaves = [tape.watch(Tensor(a)) for a in arrays]
        out = fn(*leaves)
    g = backward(tape, out)
    return out.item(), [g[leaf] for leaf in leaves]
