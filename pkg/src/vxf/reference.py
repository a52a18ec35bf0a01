"""Plain-numpy reference for the iterative coarse-to-fine refinement.

Written step by step from the algorithm description, independently of the
autodiff decoder, so the two can be compared (``vxf verify`` and the tests).
Each decoder layer is given as a dict of numpy weights; see
:func:`layer_weights`.
"""

from __future__ import annotations

import math

import numpy as np


def g(x: np.ndarray) -> np.ndarray:
    """Binarize: sigmoid(x) >= 0.5."""
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
    return (s >= 0.5).astype(np.uint8)


def h(z: np.ndarray) -> np.ndarray:
    """0 where the mask is 1, -inf elsewhere."""
    out = np.empty(z.shape)
    out[z == 1] = 0.0
    out[z != 1] = -np.inf
    return out


def nearest_resize(z_flat: np.ndarray, src, dst) -> np.ndarray:
    """Per-query nearest-neighbour resize, voxel by voxel."""
    n = z_flat.shape[0]
    vol = z_flat.reshape((n,) + tuple(src))
    out = np.zeros((n,) + tuple(dst), dtype=z_flat.dtype)
    for i in range(dst[0]):
        for j in range(dst[1]):
            for s in range(dst[2]):
                si = (i * src[0]) // dst[0]
                sj = (j * src[1]) // dst[1]
                ss = (s * src[2]) // dst[2]
                out[:, i, j, s] = vol[:, si, sj, ss]
    return out.reshape(n, -1)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a, dtype=np.float64)
    for r in range(a.shape[0]):
        row = a[r]
        m = row.max()
        e = np.exp(row - m)
        out[r] = e / e.sum()
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def gelu(x):
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def multi_head(q_in, k_in, v_in, w, heads):
    q = q_in @ w["q_w"] + w["q_b"]
    k = k_in @ w["k_w"] + w["k_b"]
    v = v_in @ w["v_w"] + w["v_b"]
    n, d = q.shape
    dh = d // heads
    ctx = np.zeros((n, d))
    for hd in range(heads):
        cols = slice(hd * dh, (hd + 1) * dh)
        a = softmax_rows(q[:, cols] @ k[:, cols].T / math.sqrt(dh))
        ctx[:, cols] = a @ v[:, cols]
    return ctx @ w["o_w"] + w["o_b"]


def masked_update(P, feats, w_q, w_k, w_v, pos, Z):
    """``P + Softmax((P w_q)(F w_k)^T + h(Z)) F w_v``; a query with no foreground attends everywhere."""
    q_in = P if pos is None else P + pos
    A = (q_in @ w_q) @ (feats @ w_k).T
    if Z is not None:
        bias = h(Z)
        for r in range(Z.shape[0]):
            if not (Z[r] == 1).any():
                bias[r] = 0.0
        A = A + bias
    return P + softmax_rows(A) @ (feats @ w_v)


def layer_weights(layer) -> dict:
    """Numpy copies of one decoder layer's weights."""
    w = {"w_q": layer.cross.w_q.data, "w_k": layer.cross.w_k.data, "w_v": layer.cross.w_v.data,
         "extras": layer.extras}
    if layer.extras:
        sa = layer.self_attn
        w.update({
            "self_first": layer.self_first, "heads": sa.num_heads,
            "ln_self": (layer.ln_self.gain.data, layer.ln_self.bias.data),
            "ln_mlp": (layer.ln_mlp.gain.data, layer.ln_mlp.bias.data),
            "attn": {"q_w": sa.q.weight.data, "q_b": sa.q.bias.data, "k_w": sa.k.weight.data,
                     "k_b": sa.k.bias.data, "v_w": sa.v.weight.data, "v_b": sa.v.bias.data,
                     "o_w": sa.out.weight.data, "o_b": sa.out.bias.data},
            "mlp": (layer.mlp.fc1.weight.data, layer.mlp.fc1.bias.data,
                    layer.mlp.fc2.weight.data, layer.mlp.fc2.bias.data),
        })
    return w


def refine(P0, F_last, full_grid, stage_feats, stage_grids, layers, pos, w_fc, c2f=True,
           pos_every_layer=True):
    """Iterative refinement.

    Inputs: initial queries ``P0 [N, d]``, last feature ``F_last [V, d]`` on
    ``full_grid``, one projected key/value feature ``[V_t, d]`` per layer on
    ``stage_grids[t]``, per-layer weights, positional embedding, ``w_fc``.
    Returns ``(Z list, mask-logit list, O, y_hat)`` with ``T + 1`` masks.
    """
    T = len(layers)
    t = 0
    P = P0
    logits = [P @ F_last.T]
    Z = [g(logits[0])]
    while True:
        w = layers[t]
        p_t = pos if (pos_every_layer or t == 0) else None
        key_mask = nearest_resize(Z[t], full_grid, stage_grids[t]) if c2f else None
        if w["extras"] and w["self_first"]:
            P = _self_block(P, p_t, w)
        P = masked_update(P, stage_feats[t], w["w_q"], w["w_k"], w["w_v"], p_t, key_mask)
        if w["extras"]:
            if not w["self_first"]:
                P = _self_block(P, p_t, w)
            f1w, f1b, f2w, f2b = w["mlp"]
            P = P + gelu(layer_norm(P, *w["ln_mlp"]) @ f1w + f1b) @ f2w + f2b
        logits.append(P @ F_last.T)
        Z.append(g(logits[-1]))
        t = t + 1
        if t == T:
            break
    O = P @ w_fc
    y_hat = np.argmax(O, axis=1)
    return Z, logits, O, y_hat


def _self_block(P, pos, w):
    x = layer_norm(P, *w["ln_self"])
    qk = x if pos is None else x + pos
    return P + multi_head(qk, qk, x, w["attn"], w["heads"])


def refine_model(model, image):
    """Run :func:`refine` on a :class:`SegmentationModel`'s own features and weights."""
    from vxf.tensor import as_tensor, no_grad
    from vxf.unet import flatten_spatial

    dec = model.decoder
    with no_grad():
        x = as_tensor(image)
        if x.ndim == 3:
            x = x.reshape(x.shape + (1,))
        pyramid = model.unet(x, bottleneck_hook=model._hook(x))
        feats, grids = [], []
        for t in range(len(dec.layers)):
            f, grid = dec.project_stage(pyramid, t)
            feats.append(f.data.astype(np.float64))
            grids.append(grid)
        F_last = flatten_spatial(pyramid.last).data.astype(np.float64)
    full = tuple(pyramid.last.shape[:3])
    P0 = np.zeros((dec.config.num_queries, dec.config.d_dec))
    layers = [layer_weights(layer) for layer in dec.layers]
    return refine(P0, F_last, full, feats, grids, layers, dec.pos.data.astype(np.float64),
                  dec.w_fc.data.astype(np.float64), c2f=dec.config.c2f,
                  pos_every_layer=dec.config.pos_every_layer)
