"""Query-based mask decoder with coarse-to-fine masked cross-attention.

Organ queries ``P`` start at zero.  Each iteration refines them by
self-attention among queries, cross-attention into a U-Net decoder stage
(restricted to the foreground of the previous mask when coarse-to-fine is
on) and an MLP; every refined ``P`` is decoded to voxel masks by a dot
product with the full-resolution feature ``F``.

Conventions fixed here:

* thresholding: ``sigmoid(logit) >= 0.5`` (i.e. ``logit >= 0``) is foreground;
* a query whose resampled mask row is entirely background attends without a
  mask for that iteration (softmax over all ``-inf`` would be undefined);
* masks are resampled to coarser key grids by nearest neighbour,
  source index ``floor(i * n_src / n_dst)``;
* ``argmax`` ties go to the lowest class index; class 0 is background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vxf import functional as F
from vxf.encoder import MLP, MultiHeadAttention
from vxf.nn import Conv3d, LayerNorm, Module, parameter, trunc_normal
from vxf.tensor import Tensor
from vxf.unet import FeaturePyramid, flatten_spatial


@dataclass
class DecoderConfig:
    num_queries: int = 20
    num_classes: int = 4
    d_dec: int = 192
    num_layers: int = 3
    num_heads: int = 4
    mlp_ratio: float = 4.0
    c2f: bool = True
    multiscale: bool = True
    pos_every_layer: bool = True
    self_attn_first: bool = True
    query_extras: bool = True  # self-attention and MLP around the cross-attention update

    def __post_init__(self):
        if self.num_queries < self.num_classes:
            raise ValueError(f"need at least as many queries ({self.num_queries}) as classes ({self.num_classes})")
        if self.num_layers < 1:
            raise ValueError("the decoder needs at least one layer")


@dataclass
class OrganQuerySet:
    P: Tensor
    pos: Tensor

    @property
    def N(self) -> int:
        return self.P.shape[0]


@dataclass
class MaskSet:
    mask_logits: Tensor  # [N, V]
    Z: np.ndarray  # [N, V] in {0, 1}
    O: Tensor | None = None  # [N, K]
    labels: np.ndarray | None = None  # [N]


@dataclass
class Snapshot:
    P: Tensor
    mask_logits: Tensor
    Z: np.ndarray
    O: Tensor | None = None
    affinities: list = field(default_factory=list)


def threshold(logits: np.ndarray) -> np.ndarray:
    return (logits >= 0).astype(np.uint8)


def coarse_predict(P: Tensor, F_last: Tensor) -> tuple[Tensor, np.ndarray]:
    """Mask logits ``P @ F^T`` and their hard masks (thresholding carries no gradient)."""
    if P.shape[-1] != F_last.shape[-1]:
        raise ValueError(f"query width {P.shape[-1]} != feature width {F_last.shape[-1]}")
    logits = P @ F_last.T
    return logits, threshold(logits.data)


def resample_mask(Z: np.ndarray, src: tuple[int, int, int], dst: tuple[int, int, int]) -> np.ndarray:
    """Nearest-neighbour resampling of ``[N, prod(src)]`` binary masks to ``dst``."""
    if tuple(src) == tuple(dst):
        return Z
    vol = Z.reshape((Z.shape[0],) + tuple(src))
    idx = [np.floor(np.arange(n_dst) * n_src / n_dst).astype(int) for n_src, n_dst in zip(src, dst)]
    vol = vol[:, idx[0]][:, :, idx[1]][:, :, :, idx[2]]
    return vol.reshape(Z.shape[0], -1)


def attention_bias(mask: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    """``h(Z)``: 0 on foreground, ``-inf`` on background.

    Rows with no foreground are returned as all-zero (unmasked fallback);
    the second value flags those rows.
    """
    empty = ~mask.astype(bool).any(axis=1)
    bias = np.where(mask.astype(bool), 0.0, -np.inf).astype(dtype)
    bias[empty] = 0.0
    return bias, empty


def cross_attend(P: Tensor, feats: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                 pos: Tensor | None = None, mask: np.ndarray | None = None,
                 record: list | None = None) -> Tensor:
    """``P + softmax((P w_q)(feats w_k)^T + h(mask)) feats w_v``.

    ``pos`` is added to ``P`` before the query projection only.  ``mask`` is a
    binary ``[N, V_t]`` array already on the key grid.  When ``record`` is
    given, the affinity matrix handed to softmax and the attention weights are
    appended to it.
    """
    q_in = P if pos is None else P + pos
    q = q_in @ w_q
    k = feats @ w_k
    v = feats @ w_v
    affinity = q @ k.T
    if mask is not None:
        bias, _ = attention_bias(mask, affinity.dtype)
        affinity = affinity + Tensor(bias)
    weights = F.softmax_lastdim(affinity)
    if record is not None:
        record.append({"affinity": affinity.data, "weights": weights.data})
    return P + weights @ v


class CrossAttention(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.w_q = parameter(trunc_normal(rng, (d, d)))
        self.w_k = parameter(trunc_normal(rng, (d, d)))
        self.w_v = parameter(trunc_normal(rng, (d, d)))

    def forward(self, P, feats, pos=None, mask=None, record=None):
        return cross_attend(P, feats, self.w_q, self.w_k, self.w_v, pos=pos, mask=mask, record=record)


class DecoderLayer(Module):
    """Self-attention among queries, masked cross-attention, MLP (pre-norm residuals)."""

    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        d = config.d_dec
        self.self_first = config.self_attn_first
        self.extras = config.query_extras
        self.cross = CrossAttention(d, rng)
        if not self.extras:
            return
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, config.num_heads, rng)
        self.ln_mlp = LayerNorm(d)
        self.mlp = MLP(d, int(d * config.mlp_ratio), rng)

    def _self(self, P: Tensor, pos: Tensor | None) -> Tensor:
        x = self.ln_self(P)
        qk = x if pos is None else x + pos
        return P + self.self_attn(qk, qk, x)

    def forward(self, P: Tensor, feats: Tensor, pos: Tensor | None, mask=None, record=None) -> Tensor:
        if not self.extras:
            return self.cross(P, feats, pos, mask, record)
        if self.self_first:
            P = self._self(P, pos)
            P = self.cross(P, feats, pos, mask, record)
        else:
            P = self.cross(P, feats, pos, mask, record)
            P = self._self(P, pos)
        return P + self.mlp(self.ln_mlp(P))


class MaskDecoder(Module):
    """Refines ``N`` organ queries against a :class:`FeaturePyramid`.

    Decoder layer ``t`` attends to pyramid stage ``t`` counted from the
    coarsest (cycling when there are more layers than stages).  The final,
    full-resolution stage is only used through ``F``.  Without multiscale,
    every layer attends to the finest intermediate stage.
    """

    def __init__(self, config: DecoderConfig, stage_channels: list[int], rng: np.random.Generator):
        self.config = config
        d = config.d_dec
        self.n_key_stages = max(len(stage_channels) - 1, 1)
        self.stage_channels = list(stage_channels)
        self.pos = parameter(trunc_normal(rng, (config.num_queries, d)))
        self.layers = [DecoderLayer(config, rng) for _ in range(config.num_layers)]
        self.stage_proj = [Conv3d(stage_channels[self.stage_index(t)], d, 1, rng)
                           for t in range(config.num_layers)]
        self.w_fc = parameter(trunc_normal(rng, (d, config.num_classes)))

    def stage_index(self, t: int) -> int:
        if not self.config.multiscale:
            return self.n_key_stages - 1
        return t % self.n_key_stages

    def initial_queries(self, dtype) -> OrganQuerySet:
        zeros = Tensor(np.zeros((self.config.num_queries, self.config.d_dec), dtype=dtype))
        return OrganQuerySet(zeros, self.pos)

    def project_stage(self, pyramid: FeaturePyramid, t: int) -> tuple[Tensor, tuple[int, int, int]]:
        stage = pyramid.stages[self.stage_index(t)]
        return flatten_spatial(self.stage_proj[t](stage)), tuple(stage.shape[:3])

    def classify(self, P: Tensor) -> tuple[Tensor, np.ndarray]:
        return classify(P, self.w_fc)

    def refine(self, pyramid: FeaturePyramid, record: bool = False) -> list[Snapshot]:
        """Run every decoder layer; returns ``T + 1`` snapshots (coarse first)."""
        if pyramid.last is None:
            raise ValueError("pyramid has no last-block feature F")
        full = tuple(pyramid.last.shape[:3])
        F_last = flatten_spatial(pyramid.last)
        queries = self.initial_queries(F_last.dtype)
        P = queries.P
        logits, Z = coarse_predict(P, F_last)
        snaps = [Snapshot(P, logits, Z, P @ self.w_fc)]
        for t, layer in enumerate(self.layers):
            feats, grid = self.project_stage(pyramid, t)
            mask = resample_mask(Z, full, grid) if self.config.c2f else None
            pos = queries.pos if (self.config.pos_every_layer or t == 0) else None
            rec = [] if record else None
            P = layer(P, feats, pos, mask, rec)
            logits, Z = coarse_predict(P, F_last)
            snaps.append(Snapshot(P, logits, Z, P @ self.w_fc, rec or []))
        return snaps

    def forward(self, pyramid: FeaturePyramid) -> tuple[MaskSet, list[Snapshot]]:
        snaps = self.refine(pyramid)
        last = snaps[-1]
        O, labels = self.classify(last.P)
        return MaskSet(last.mask_logits, last.Z, O, labels), snaps


def classify(P: Tensor, w_fc: Tensor) -> tuple[Tensor, np.ndarray]:
    """Class logits ``O = P @ w_fc`` and per-query labels (ties to the lowest index)."""
    O = P @ w_fc
    return O, np.argmax(O.data, axis=-1)
