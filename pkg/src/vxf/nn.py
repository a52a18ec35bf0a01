"""Parameter containers and the small layers the models are assembled from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from vxf import functional as F
from vxf.tensor import Tensor, get_default_dtype


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.01) -> np.ndarray:
    gain = np.sqrt(2.0 / (1 + slope ** 2))
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


class Module:
    """Base class: attributes that are Tensors with ``requires_grad`` are parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def state_dict(self) -> dict[str, Tensor]:
        return dict(sorted(self.named_parameters()))

    def parameters(self) -> list[Tensor]:
        return list(self.state_dict().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"checkpoint mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {value.shape}, model {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = 0.02):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out), std))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias)


class InstanceNorm(Module):
    def __init__(self, channels: int):
        self.gain = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.instance_norm(x, self.gain, self.bias)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 bias: bool = True):
        self.stride = stride
        self.kernel = parameter(kaiming_normal(rng, (c_out, c_in, k, k, k), c_in * k ** 3))
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.kernel, self.bias, stride=self.stride)


class ConvNormAct(Module):
    """conv3d -> instance norm -> leaky ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3, stride: int = 1):
        self.conv = Conv3d(c_in, c_out, k, rng, stride=stride, bias=False)
        self.norm = InstanceNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.norm(self.conv(x)))
