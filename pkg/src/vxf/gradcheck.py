"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from vxf.tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                   indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``param`` (in place perturbation)."""
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.size)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        plus = float(fn().data)
        flat[i] = orig - h
        minus = float(fn().data)
        flat[i] = orig
        grad[i] = (plus - minus) / (2 * h)
    return grad.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over entries, scaled by the gradient norm.

    Entries are compared against the overall gradient magnitude so that
    near-zero components do not blow the ratio up.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between backward() and finite differences over ``params``.

    ``fn`` must rebuild the graph on every call.  With ``max_entries`` only a
    random subset of each parameter's entries is probed.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    fn().backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        else:
            idx = np.arange(p.size)
        numeric = numerical_grad(fn, p, h, idx).ravel()[idx]
        worst = max(worst, relative_error(analytic.ravel()[idx], numeric))
    return worst
