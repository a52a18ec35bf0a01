"""Convolutional U-Net backbone producing the decoder feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vxf import functional as F
from vxf.nn import Conv3d, ConvNormAct, InstanceNorm, Module
from vxf.tensor import Tensor


@dataclass
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 16
    depth: int = 3
    max_channels: int = 320

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.max_channels)


@dataclass
class FeaturePyramid:
    """Decoder stages coarsest to finest (``[D_t, H_t, W_t, C_t]``) plus the last-block map.

    ``last`` is the full-resolution feature projected to ``d_dec`` channels
    (``None`` for a plain segmentation U-Net).
    """

    stages: list[Tensor]
    last: Tensor | None = None
    skips: list[Tensor] = field(default_factory=list)

    @property
    def finest(self) -> Tensor:
        return self.stages[-1]


class ConvBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.a = ConvNormAct(c_in, c_out, rng)
        self.b = ConvNormAct(c_out, c_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.b(self.a(x))


class UpBlock(Module):
    """1x1x1 conv + trilinear x2 -> norm/act -> concat skip -> two 3x3x3 convs.

    The channel-reducing 1x1x1 conv runs before the upsample; both are linear
    per voxel so the order does not change the map, only the cost.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.reduce = Conv3d(c_in, c_out, 1, rng, bias=False)
        self.norm = InstanceNorm(c_out)
        self.block = ConvBlock(2 * c_out, c_out, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        up = F.upsample3d(self.reduce(x), 2, "trilinear")
        up = F.leaky_relu(self.norm(up))
        return self.block(F.concat([skip, up], axis=-1))


class UNet(Module):
    """Encoder levels ``0..depth-1`` (two convs, then a stride-2 conv), a bottleneck
    block, and a mirrored decoder with skip concatenation.

    ``bottleneck_hook`` lets a Transformer encoder modify the deepest map
    before decoding; it receives ``(bottleneck, encoder_features)``.
    """

    def __init__(self, config: UNetConfig, rng: np.random.Generator, d_out: int | None = None):
        self.config = config
        ch = config.channels
        self.enc = []
        self.down = []
        c_prev = config.in_channels
        for level in range(config.depth):
            self.enc.append(ConvBlock(c_prev, ch(level), rng))
            self.down.append(ConvNormAct(ch(level), ch(level + 1), rng, stride=2))
            c_prev = ch(level + 1)
        self.bottleneck = ConvBlock(c_prev, ch(config.depth), rng)
        self.dec = [UpBlock(ch(level + 1), ch(level), rng) for level in reversed(range(config.depth))]
        self.last_proj = Conv3d(ch(0), d_out, 1, rng) if d_out else None

    def check_input(self, x: Tensor) -> None:
        m = 2 ** self.config.depth
        for axis, n in zip("DHW", x.shape[:3]):
            if n % m:
                raise ValueError(f"extent {axis}={n} is not divisible by 2**depth={m}")

    def forward(self, x: Tensor, bottleneck_hook=None) -> FeaturePyramid:
        if x.ndim == 3:
            x = x.reshape(x.shape + (1,))
        self.check_input(x)
        skips = []
        h = x
        for enc, down in zip(self.enc, self.down):
            h = enc(h)
            skips.append(h)
            h = down(h)
        h = self.bottleneck(h)
        if bottleneck_hook is not None:
            h = bottleneck_hook(h, skips)
        stages = [h]
        for up, skip in zip(self.dec, reversed(skips)):
            h = up(h, skip)
            stages.append(h)
        last = self.last_proj(h) if self.last_proj is not None else None
        return FeaturePyramid(stages, last, skips)


def flatten_spatial(x: Tensor) -> Tensor:
    """``[D, H, W, C] -> [D*H*W, C]``; row ``(z*H + y)*W + x`` holds voxel (z, y, x)."""
    return x.reshape(-1, x.shape[-1])


def flat_index(z: int, y: int, x: int, extents) -> int:
    _, h, w = extents
    return (z * h + y) * w + x


def unflat_index(i: int, extents) -> tuple[int, int, int]:
    _, h, w = extents
    return i // (h * w), (i // w) % h, i % w


def project_stage(stage: Tensor, proj: Conv3d) -> Tensor:
    """1x1x1 conv to ``d_dec`` channels, flattened to ``[D_t*H_t*W_t, d_dec]``."""
    return flatten_spatial(proj(stage))
