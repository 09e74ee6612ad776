"""Parameters and the two optimizers used for training runs.

A ``Parameter`` is just a named ``Tensor`` with ``requires_grad`` on and a
zero-initialized grad buffer, so optimizer steps never need a None check.
Optimizers mutate parameter arrays in place; everything else in the tape
treats tensor values as frozen.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from ..errors import NumericError
from .tensor import Tensor

__all__ = ["Parameter", "SGD", "Adam", "zero_grads", "clip_grad_norm"]


class Parameter(Tensor):
    """A trainable tensor with a stable name for checkpoints and error messages."""

    __slots__ = ("name",)

    def __init__(self, array, name: str = "param") -> None:
        super().__init__(array, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.array)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.array)
        else:
            p.grad.fill(0.0)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all grads down so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def _check_finite(p: Parameter) -> None:
    if not np.isfinite(p.grad).all():
        raise NumericError(f"non-finite gradient for parameter '{p.name}'")


class SGD:
    """Plain gradient descent, optionally with momentum."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.0) -> None:
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.array) for p in self.params] if momentum else None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            _check_finite(p)
            if self._velocity is not None:
                v = self._velocity[i]
                v *= np.float32(self.momentum)
                v += p.grad
                p.array -= np.float32(self.lr) * v
            else:
                p.array -= np.float32(self.lr) * p.grad

    def zero_grad(self) -> None:
        zero_grads(self.params)


class Adam:
    """Adam with bias correction; state arrays are kept per parameter."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.array) for p in self.params]
        self._v = [np.zeros_like(p.array) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            _check_finite(p)
            m, v = self._m[i], self._v[i]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            m_hat = m / np.float32(bias1)
            v_hat = v / np.float32(bias2)
            p.array -= np.float32(self.lr) * m_hat / (np.sqrt(v_hat) + np.float32(self.eps))

    def zero_grad(self) -> None:
        zero_grads(self.params)
