"""Numeric core: autograd tensors, optimizers, seeded RNG, tensor files."""

from .io import load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .optim import SGD, Adam, Parameter, clip_grad_norm, zero_grads
from .rng import SeededRng
from .tensor import (
    MacCounter,
    Tensor,
    as_tensor,
    backward,
    concat,
    gather_rows,
    gelu,
    getitem,
    index_rows,
    layer_norm,
    log_sigmoid,
    log_softmax,
    mac_counter,
    pause_macs,
    matmul,
    reshape,
    sigmoid,
    softmax,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "matmul",
    "layer_norm",
    "gelu",
    "softmax",
    "log_softmax",
    "sigmoid",
    "log_sigmoid",
    "concat",
    "reshape",
    "transpose",
    "getitem",
    "tsum",
    "tmean",
    "index_rows",
    "gather_rows",
    "mac_counter",
    "pause_macs",
    "MacCounter",
    "Parameter",
    "SGD",
    "Adam",
    "zero_grads",
    "clip_grad_norm",
    "SeededRng",
    "save_tensor",
    "load_tensor",
    "save_checkpoint",
    "load_checkpoint",
]
