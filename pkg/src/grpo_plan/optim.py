"""First-order optimisers over a flat float64 parameter vector.

Both minimise: ``step`` receives the gradient of a loss and updates
``theta`` in place.
"""

from __future__ import annotations

import numpy as np

OPTIMIZERS = ("adam", "sgd")


class Sgd:
    def __init__(self, size: int, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = np.zeros(size) if momentum else None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        if self.velocity is None:
            theta -= self.lr * grad
            return
        self.velocity *= self.momentum
        self.velocity += grad
        theta -= self.lr * self.velocity


class Adam:
    """Adam with bias correction; buffers are updated in place."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self._buf = np.empty(size)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1.0 - b1) * grad
        self.v *= b2
        np.multiply(grad, grad, out=self._buf)
        self._buf *= 1.0 - b2
        self.v += self._buf
        step = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        np.sqrt(self.v, out=self._buf)
        self._buf += self.eps * np.sqrt(1.0 - b2**self.t)
        np.divide(self.m, self._buf, out=self._buf)
        self._buf *= step
        theta -= self._buf


def make_optimizer(name: str, size: int, lr: float, momentum: float = 0.0):
    if name == "adam":
        return Adam(size, lr)
    if name == "sgd":
        return Sgd(size, lr, momentum)
    raise ValueError(f"unknown optimizer {name!r}; expected one of {OPTIMIZERS}")
