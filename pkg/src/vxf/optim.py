"""First-order optimizers and the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from vxf.tensor import Tensor


def cosine_lr(step: int, total: int, base_lr: float, warmup: int = 0, floor: float = 0.0) -> float:
    """Linear warmup over ``warmup`` steps, then cosine decay from ``base_lr`` to ``floor``."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm."""
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


class Optimizer:
    def __init__(self, named_params: dict[str, Tensor]):
        self.params = dict(named_params)
        self.step_count = 0

    def state(self) -> dict[str, np.ndarray]:
        return {"step": np.array([self.step_count], dtype=np.float64)}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"][0])


class AdamW(Optimizer):
    """Adam with decoupled weight decay."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        super().__init__(named_params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.data *= (1.0 - lr * self.weight_decay)
            p.data -= (lr * update).astype(p.dtype, copy=False)

    def state(self):
        out = super().state()
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, state):
        super().load_state(state)
        for k, p in self.params.items():
            self.m[k] = np.asarray(state[f"m.{k}"], dtype=p.dtype).copy()
            self.v[k] = np.asarray(state[f"v.{k}"], dtype=p.dtype).copy()


class SGD(Optimizer):
    """SGD with Nesterov momentum and coupled L2 weight decay."""

    def __init__(self, named_params, momentum: float = 0.99, weight_decay: float = 3e-5,
                 nesterov: bool = True):
        super().__init__(named_params)
        self.momentum, self.weight_decay, self.nesterov = momentum, weight_decay, nesterov
        self.buf = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            b = self.buf[name]
            b *= self.momentum
            b += g
            d = g + self.momentum * b if self.nesterov else b
            p.data -= (lr * d).astype(p.dtype, copy=False)

    def state(self):
        out = super().state()
        for k in self.params:
            out[f"buf.{k}"] = self.buf[k]
        return out

    def load_state(self, state):
        super().load_state(state)
        for k, p in self.params.items():
            self.buf[k] = np.asarray(state[f"buf.{k}"], dtype=p.dtype).copy()


def make_optimizer(kind: str, named_params, weight_decay: float | None = None, momentum: float = 0.99):
    if kind == "adamw":
        return AdamW(named_params, weight_decay=1e-4 if weight_decay is None else weight_decay)
    if kind == "sgd":
        return SGD(named_params, momentum=momentum, weight_decay=3e-5 if weight_decay is None else weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}; expected 'adamw' or 'sgd'")
