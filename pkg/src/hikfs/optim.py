"""Gradient-descent optimizers and learning-rate schedules."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class Optimizer:
    """Shared bookkeeping: named parameters, step counter, grad checks."""

    def __init__(self, params):
        self._params = [(str(name), p) for name, p in dict(params).items()] \
            if isinstance(params, dict) else [(str(n), p) for n, p in params]
        if not self._params:
            raise ValueError("optimizer needs at least one parameter")
        for name, p in self._params:
            if not isinstance(p, Tensor):
                raise TypeError(f"parameter '{name}' is not a Tensor")
        self.step_count = 0

    def _checked_grads(self):
        for name, p in self._params:
            if p.grad is None:
                raise RuntimeError(f"parameter '{name}' has no gradient; run backward first")
            if p.grad.shape != p.data.shape:
                raise RuntimeError(f"parameter '{name}' has a gradient of mismatched shape")
        return self._params

    def step(self, lr: float):
        raise NotImplementedError


class SGD(Optimizer):
    """Momentum SGD: v <- momentum*v + grad + wd*p, then p <- p - lr*v."""

    def __init__(self, params, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = {name: np.zeros_like(p.data) for name, p in self._params}

    def step(self, lr: float):
        items = self._checked_grads()
        self.step_count += 1
        for name, p in items:
            g = p.grad if self.weight_decay == 0.0 else p.grad + self.weight_decay * p.data
            v = self._velocity[name]
            v[...] = self.momentum * v + g
            p.data = p.data - lr * v
            p.grad = None


class Adam(Optimizer):
    """Adam with bias correction; weight decay is added to the gradient."""

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        super().__init__(params)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._m = {name: np.zeros_like(p.data) for name, p in self._params}
        self._v = {name: np.zeros_like(p.data) for name, p in self._params}

    def step(self, lr: float):
        items = self._checked_grads()
        self.step_count += 1
        t = self.step_count
        for name, p in items:
            g = p.grad if self.weight_decay == 0.0 else p.grad + self.weight_decay * p.data
            m, v = self._m[name], self._v[name]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr at step 0 to exactly 0 at total_steps."""
    if total_steps < 1:
        raise ValueError("cosine_lr: total_steps must be >= 1")
    if step < 0 or step > total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def halving_lr(base_lr: float, step: int, interval: int = 10000) -> float:
    """Halve the rate every ``interval`` steps (step 0 counts from base_lr)."""
    if interval < 1:
        raise ValueError("halving_lr: interval must be >= 1")
    if step < 0:
        raise ValueError("halving_lr: step must be >= 0")
    return base_lr * 0.5 ** (step // interval)


def make_schedule(kind: str, base_lr: float, total_steps: int):
    """Return a step -> learning-rate callable."""
    if kind == "cosine":
        return lambda step: cosine_lr(base_lr, step, total_steps)
    if kind == "halving":
        return lambda step: halving_lr(base_lr, step)
    if kind == "constant":
        return lambda step: base_lr
    raise ValueError(f"unknown schedule '{kind}'")
