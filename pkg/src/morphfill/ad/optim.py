"""Adam optimizer with a per-epoch step-decay schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["Adam", "StepDecay", "adam_step"]


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction; ``t`` is 1-based."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            adam_step(p.data, p.grad.data.astype(p.dtype, copy=False),
                      m, v, self.t, self.lr, b1, b2, self.eps)


class StepDecay:
    """Multiplies the learning rate by ``gamma`` once per epoch."""

    def __init__(self, optimizer: Adam, gamma: float = 0.98):
        self.optimizer = optimizer
        self.gamma = gamma
        self.base_lr = optimizer.lr
        self.epoch = 0

    def epoch_end(self):
        self.epoch += 1
        self.optimizer.lr = self.base_lr * self.gamma ** self.epoch

    @property
    def lr(self) -> float:
        return self.optimizer.lr
