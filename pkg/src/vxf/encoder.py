"""Patch tokenization and the pre-norm Transformer encoder stack."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vxf import functional as F
from vxf.nn import LayerNorm, Linear, Module, parameter, trunc_normal
from vxf.tensor import Tensor, as_tensor


@dataclass
class PatchSequence:
    """Flattened ``P x P x P`` blocks of a ``[D, H, W, C]`` map.

    ``tokens`` is ``[N, P**3 * C]``; token ``i`` is block ``i`` in (z, y, x)
    row-major block order and, inside a block, values run (z, y, x, channel)
    row-major.
    """

    tokens: Tensor
    grid: tuple[int, int, int]
    patch_size: int
    channels: int

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


def sequentialize(x, patch_size: int) -> PatchSequence:
    x = as_tensor(x)
    if x.ndim == 3:
        x = x.reshape(x.shape + (1,))
    d, h, w, c = x.shape
    p = patch_size
    for axis, n in zip("DHW", (d, h, w)):
        if n % p:
            raise ValueError(f"extent {axis}={n} is not divisible by patch size {p}")
    grid = (d // p, h // p, w // p)
    t = x.reshape(grid[0], p, grid[1], p, grid[2], p, c)
    t = t.transpose(0, 2, 4, 1, 3, 5, 6)
    tokens = t.reshape(grid[0] * grid[1] * grid[2], p ** 3 * c)
    return PatchSequence(tokens, grid, p, c)


def unsequentialize(seq: PatchSequence) -> Tensor:
    """Inverse of :func:`sequentialize`."""
    gd, gh, gw = seq.grid
    p, c = seq.patch_size, seq.channels
    t = seq.tokens.reshape(gd, gh, gw, p, p, p, c).transpose(0, 3, 1, 4, 2, 5, 6)
    return t.reshape(gd * p, gh * p, gw * p, c)


def embed(seq: PatchSequence | Tensor, E: Tensor, E_pos: Tensor) -> Tensor:
    """``z0 = tokens @ E + E_pos``."""
    tokens = seq.tokens if isinstance(seq, PatchSequence) else seq
    if tokens.shape[0] != E_pos.shape[0]:
        raise ValueError(f"sequence has {tokens.shape[0]} tokens but E_pos has {E_pos.shape[0]} rows")
    return tokens @ E + E_pos


class MultiHeadAttention(Module):
    """Scaled dot-product attention split across heads, with an output projection."""

    def __init__(self, d: int, num_heads: int, rng: np.random.Generator):
        if d % num_heads:
            raise ValueError(f"width {d} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        n, d = x.shape
        return x.reshape(n, self.num_heads, d // self.num_heads).transpose(1, 0, 2)

    def forward(self, q_in: Tensor, k_in: Tensor | None = None, v_in: Tensor | None = None) -> Tensor:
        k_in = q_in if k_in is None else k_in
        v_in = k_in if v_in is None else v_in
        n, d = q_in.shape
        dh = d // self.num_heads
        q = self._heads(self.q(q_in))
        k = self._heads(self.k(k_in))
        v = self._heads(self.v(v_in))
        scores = F.scale(q @ k.transpose(0, 2, 1), 1.0 / np.sqrt(dh))
        weights = F.softmax_lastdim(scores)
        self.last_weights = weights.data
        ctx = (weights @ v).transpose(1, 0, 2).reshape(n, d)
        return self.out(ctx)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """``z' = MSA(LN(z)) + z``; ``z_out = MLP(LN(z')) + z'``."""

    def __init__(self, d: int, num_heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, num_heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, int(d * mlp_ratio), rng)

    def forward(self, z: Tensor) -> Tensor:
        z = self.attn(self.ln1(z)) + z
        return self.mlp(self.ln2(z)) + z


@dataclass
class EncoderConfig:
    num_layers: int = 1
    d_enc: int = 768
    num_heads: int = 4
    mlp_ratio: float = 4.0
    patch_size: int = 4
    source: str = "cnn_features"  # or "raw_volume" (diagnostic)

    def __post_init__(self):
        if self.d_enc % self.num_heads:
            raise ValueError(f"d_enc={self.d_enc} must be divisible by num_heads={self.num_heads}")
        if self.source not in ("cnn_features", "raw_volume"):
            raise ValueError(f"unknown encoder source {self.source!r}")


class TransformerEncoder(Module):
    """Tokenize a feature map, run ``L`` encoder layers, map back to ``out_channels``.

    The token grid is fixed at construction; inputs with a different grid are
    rejected rather than interpolating ``E_pos``.
    """

    def __init__(self, config: EncoderConfig, in_channels: int, grid: tuple[int, int, int],
                 out_channels: int, rng: np.random.Generator):
        self.config = config
        self.grid = tuple(grid)
        p = config.patch_size
        n_tokens = int(np.prod(grid))
        self.E = parameter(trunc_normal(rng, (p ** 3 * in_channels, config.d_enc)))
        self.E_pos = parameter(trunc_normal(rng, (n_tokens, config.d_enc)))
        self.layers = [EncoderLayer(config.d_enc, config.num_heads, config.mlp_ratio, rng)
                       for _ in range(config.num_layers)]
        self.norm = LayerNorm(config.d_enc)
        self.proj = Linear(config.d_enc, out_channels, rng)

    def encode_tokens(self, x: Tensor) -> Tensor:
        seq = sequentialize(x, self.config.patch_size)
        if seq.grid != self.grid:
            raise ValueError(f"token grid {seq.grid} does not match configured grid {self.grid}")
        z = embed(seq, self.E, self.E_pos)
        for layer in self.layers:
            z = layer(z)
        return z

    def forward(self, x: Tensor) -> Tensor:
        """Returns a ``[gD, gH, gW, out_channels]`` map for the U-Net decoding path."""
        z = self.encode_tokens(x)
        y = self.proj(self.norm(z))
        return y.reshape(self.grid + (y.shape[-1],))
