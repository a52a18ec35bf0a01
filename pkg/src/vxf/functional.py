"""Differentiable operations on :class:`~vxf.tensor.Tensor`.

Volumes are channels-last: a feature map is ``[D, H, W, C]`` and flattening
its spatial part gives rows in (z, y, x) row-major order.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from vxf.tensor import Tensor, as_tensor, make_result

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _pair(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    if isinstance(b, Tensor):
        return as_tensor(a, b.dtype), b
    return as_tensor(a), as_tensor(b)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------- arithmetic
def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * a.data / b.data, b.shape)

    return make_result(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return make_result(out, (a,), backward, "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ------------------------------------------------------------------ reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# --------------------------------------------------------------- shape moves
def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out), (a,), backward, "getitem")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tensors, backward, "stack")


# ------------------------------------------------------------------- matmul
def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]`` with broadcasting."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


# --------------------------------------------------------------- activations
def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_result(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU: ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return make_result(out, (a,), backward, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return make_result(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def elementwise(x: Tensor, kind: str, other=None) -> Tensor:
    """Dispatch by name: ``sigmoid``, ``gelu``, ``relu``, ``add`` or ``scale``."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    if kind == "add":
        return add(x, other)
    if kind == "scale":
        return scale(x, other)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction.

    A slice that is entirely ``-inf`` maps to all zeros instead of NaN.
    """
    data = x.data
    if data.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    m = data.max(axis=-1, keepdims=True)
    dead = ~np.isfinite(m)
    m = np.where(dead, 0, m)
    e = np.exp(data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s == 0, 1, s)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return make_result(out.astype(data.dtype, copy=False), (x,), backward, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    data = x.data
    m = data.max(axis=-1, keepdims=True)
    shifted = data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


# ------------------------------------------------------------- normalization
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then apply ``gain``/``bias``."""
    n = x.shape[-1]
    if n < 1:
        raise ValueError("layer_norm needs a non-empty embedding axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(f"gain/bias must have shape ({n},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out.astype(x.dtype, copy=False), (x, gain, bias), backward, "layer_norm")


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial axes of a ``[D, H, W, C]`` map."""
    spatial = tuple(range(x.ndim - 1))
    count = int(np.prod(x.shape[:-1]))
    mu = x.data.mean(axis=spatial, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=spatial, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        s1 = gx_hat.sum(axis=spatial, keepdims=True) / count
        s2 = (gx_hat * xhat).sum(axis=spatial, keepdims=True) / count
        gx = inv * (gx_hat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=spatial), g.sum(axis=spatial)

    return make_result(out.astype(x.dtype, copy=False), (x, gain, bias), backward, "instance_norm")


# -------------------------------------------------------------- convolution
def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """Direct 3D cross-correlation.

    ``x`` is ``[D, H, W, C_in]``, ``kernel`` is ``[C_out, C_in, k, k, k]`` and
    the result is ``[D', H', W', C_out]`` with ``D' = (D + 2p - k) // s + 1``.
    ``padding=None`` means "same" padding ``(k - 1) // 2``.
    """
    if x.ndim != 4:
        raise ValueError(f"conv3d expects a [D, H, W, C] map, got shape {x.shape}")
    c_out, c_in, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"kernel must be cubic with odd extent, got {kernel.shape}")
    if x.shape[-1] != c_in:
        raise ValueError(f"conv3d channel mismatch: input has {x.shape[-1]}, kernel expects {c_in}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    pad = (k - 1) // 2 if padding is None else padding
    dims = x.shape[:3]
    out_dims = tuple((n + 2 * pad - k) // stride + 1 for n in dims)
    if min(out_dims) < 1:
        raise ValueError(f"conv3d output extent underflow for input {dims}, k={k}, pad={pad}")

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    w = np.ascontiguousarray(kernel.data.transpose(2, 3, 4, 1, 0))  # k,k,k,Ci,Co
    Do, Ho, Wo = out_dims
    span = lambda a, n: slice(a, a + stride * (n - 1) + 1, stride)  # noqa: E731

    if k == 1 and stride == 1:
        out = xp @ w[0, 0, 0]
    elif c_in <= 2:
        # rank-deficient matmuls are slow; broadcast instead
        out = np.zeros(out_dims + (c_out,), dtype=np.result_type(x.data, kernel.data))
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    xs = xp[span(a, Do), span(b, Ho), span(c, Wo)]
                    for i in range(c_in):
                        out += xs[..., i:i + 1] * w[a, b, c, i]
    else:
        out = np.zeros(out_dims + (c_out,), dtype=np.result_type(x.data, kernel.data))
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    out += xp[span(a, Do), span(b, Ho), span(c, Wo)] @ w[a, b, c]
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    sl = (span(a, Do), span(b, Ho), span(c, Wo))
                    if kernel.requires_grad:
                        gw[a, b, c] = xp[sl].reshape(-1, c_in).T @ g2
                    if gxp is not None:
                        gxp[sl] += g @ w[a, b, c].T
        gx = None
        if gxp is not None:
            gx = gxp[pad:pad + dims[0], pad:pad + dims[1], pad:pad + dims[2]] if pad else gxp
        gk = gw.transpose(4, 3, 0, 1, 2) if kernel.requires_grad else None
        grads = (gx, gk)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "conv3d")


# ---------------------------------------------------------------- resampling
def _linear_upsample_matrix(n: int, dtype) -> np.ndarray:
    """``[2n, n]`` interpolation weights, half-pixel centres (align_corners=False).

    Output index ``o`` samples source coordinate ``(o + 0.5) / 2 - 0.5``,
    clamped to ``[0, n - 1]``.
    """
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        s = min(max((o + 0.5) / 2 - 0.5, 0.0), n - 1)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n - 1)
        frac = s - i0
        m[o, i0] += 1 - frac
        m[o, i1] += frac
    return m


def upsample3d(x: Tensor, factor: int = 2, mode: str = "trilinear") -> Tensor:
    """Double the three spatial extents of a ``[D, H, W, C]`` map.

    ``nearest`` replicates each voxel into a 2x2x2 block.  ``trilinear`` is
    separable linear interpolation with half-pixel centres (align_corners=False):
    output voxel ``o`` reads source coordinate ``(o + 0.5)/2 - 0.5`` per axis,
    clamped at the borders, so a constant field stays constant.
    """
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    data = x.data
    if mode == "nearest":
        out = data.repeat(2, 0).repeat(2, 1).repeat(2, 2)

        def backward(g):
            d, h, w, c = data.shape
            return (g.reshape(d, 2, h, 2, w, 2, c).sum(axis=(1, 3, 5)),)

        return make_result(out, (x,), backward, "upsample_nearest")
    if mode != "trilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    mats = [_linear_upsample_matrix(n, data.dtype) for n in data.shape[:3]]
    out = data
    for axis, m in enumerate(mats):
        out = np.moveaxis(np.tensordot(m, out, axes=(1, axis)), 0, axis)

    def backward(g):
        for axis, m in enumerate(mats):
            g = np.moveaxis(np.tensordot(m.T, g, axes=(1, axis)), 0, axis)
        return (np.ascontiguousarray(g),)

    return make_result(np.ascontiguousarray(out), (x,), backward, "upsample_trilinear")


# ----------------------------------------------------------------- losses
def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise ``softplus(x) - x * t`` (stable binary cross-entropy on logits)."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.dtype)
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return make_result(out, (logits,), lambda g: (g * (_sigmoid_np(x) - t),), "bce_with_logits")
