"""Sliding-window whole-volume inference."""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np


def worker_count() -> int:
    """Worker-pool size: ``VXF_THREADS`` if set, else 1."""
    raw = os.environ.get("VXF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"VXF_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"VXF_THREADS must be a positive integer, got {raw!r}")
    return n


@dataclass
class WindowPlan:
    volume: tuple[int, int, int]  # original extents
    padded: tuple[int, int, int]
    window: tuple[int, int, int]
    stride: tuple[int, int, int]
    origins: list[tuple[int, int, int]]  # sorted lexicographically

    def coverage(self) -> np.ndarray:
        """Number of windows covering each voxel of the padded volume."""
        count = np.zeros(self.padded, dtype=np.int64)
        for o in self.origins:
            count[o[0]:o[0] + self.window[0], o[1]:o[1] + self.window[1], o[2]:o[2] + self.window[2]] += 1
        return count


def _axis_origins(n: int, w: int, stride: int) -> list[int]:
    origins = list(range(0, n - w + 1, stride))
    if origins[-1] != n - w:
        origins.append(n - w)
    return origins


def plan_windows(extents, window, overlap: float = 0.5) -> WindowPlan:
    """Tile ``extents`` with windows at stride ``floor(window * (1 - overlap))``.

    The last window on each axis is clamped to the boundary.  Axes shorter
    than the window are reflect-padded up to the window size.
    """
    extents = tuple(int(e) for e in extents)
    window = tuple(int(w) for w in window)
    if len(extents) != 3 or len(window) != 3:
        raise ValueError("extents and window must have three axes")
    if min(window) <= 0:
        raise ValueError(f"window must be positive on every axis, got {window}")
    if min(extents) <= 0:
        raise ValueError(f"volume extents must be positive, got {extents}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    padded = tuple(max(e, w) for e, w in zip(extents, window))
    stride = tuple(max(1, int(np.floor(w * (1.0 - overlap)))) for w in window)
    per_axis = [_axis_origins(n, w, s) for n, w, s in zip(padded, window, stride)]
    origins = [tuple(o) for o in itertools.product(*per_axis)]
    return WindowPlan(extents, padded, window, stride, origins)


def _pad(image: np.ndarray, padded) -> np.ndarray:
    pads = [(0, p - n) for n, p in zip(image.shape[:3], padded)] + [(0, 0)] * (image.ndim - 3)
    if not any(after for _, after in pads):
        return image
    return np.pad(image, pads, mode="reflect")


def aggregate(model, volume, plan: WindowPlan, mask_mode: str = "soft",
              background: str = "no_object", workers: int | None = None,
              window_fn=None) -> tuple[np.ndarray, np.ndarray]:
    """Stitch per-window class probabilities into ``(prob [K, D, H, W], labels [D, H, W])``.

    Overlaps are averaged by coverage count; accumulation runs in origin order
    whatever the worker count.  Labels are the argmax over classes, ties to
    the lower index.  ``window_fn(crop) -> [K, *window]`` overrides the
    model's own window prediction.
    """
    image = np.asarray(getattr(volume, "data", volume))
    if image.ndim == 3:
        image = image[..., None]
    if tuple(image.shape[:3]) != plan.volume:
        raise ValueError(f"plan was made for extents {plan.volume}, volume has {tuple(image.shape[:3])}")
    image = _pad(image, plan.padded)
    if window_fn is None:
        def window_fn(crop):
            return model.predict_window(crop, mask_mode=mask_mode, background=background)
    w = plan.window

    def run(origin):
        z, y, x = origin
        return window_fn(image[z:z + w[0], y:y + w[1], x:x + w[2]])

    workers = worker_count() if workers is None else workers
    if workers > 1 and len(plan.origins) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, plan.origins))
    else:
        results = [run(o) for o in plan.origins]

    K = results[0].shape[0]
    acc = np.zeros((K,) + plan.padded, dtype=np.float64)
    for (z, y, x), prob in zip(plan.origins, results):
        acc[:, z:z + w[0], y:y + w[1], x:x + w[2]] += prob
    acc /= plan.coverage()
    D, H, W = plan.volume
    prob = acc[:, :D, :H, :W]
    labels = np.argmax(prob, axis=0)  # first maximum wins ties
    return prob, labels
