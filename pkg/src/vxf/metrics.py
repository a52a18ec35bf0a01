"""Overlap and surface metrics on label volumes, and the JSON metrics report."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from scipy import ndimage


class UndefinedMetric(ValueError):
    """The metric has no value for these inputs (e.g. Hausdorff with an empty mask)."""


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {b.shape}")


def dice_score(pred, gt, k: int) -> float:
    """``2|P & G| / (|P| + |G|)`` for class ``k``; 1.0 when both are empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _same_shape(pred, gt)
    p, g = pred == k, gt == k
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it (or on the border)."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(mask.ndim, 1),
                                   border_value=0)
    return mask & ~inner


def _directed(a_pts: np.ndarray, b_pts: np.ndarray) -> float:
    worst = 0.0
    for start in range(0, len(a_pts), 512):
        chunk = a_pts[start:start + 512]
        d2 = ((chunk[:, None, :] - b_pts[None, :, :]) ** 2).sum(-1)
        worst = max(worst, float(d2.min(axis=1).max()))
    return worst


def hausdorff(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0)) -> float:
    """Exact (max) symmetric Hausdorff distance between mask surfaces, in spacing units.

    Raises :class:`UndefinedMetric` if either mask is empty.
    """
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    _same_shape(pred_mask, gt_mask)
    if not pred_mask.any() or not gt_mask.any():
        raise UndefinedMetric("Hausdorff distance is undefined when a mask is empty")
    scale = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(surface(pred_mask)) * scale
    b = np.argwhere(surface(gt_mask)) * scale
    return math.sqrt(max(_directed(a, b), _directed(b, a)))


def sens_spec(pred_mask, gt_mask) -> tuple[float, float]:
    """Voxel sensitivity ``TP/(TP+FN)`` and specificity ``TN/(TN+FP)``.

    Raises :class:`UndefinedMetric` when the ground truth has no positives
    (sensitivity) or no negatives (specificity).
    """
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    _same_shape(p, g)
    tp = int((p & g).sum())
    fn = int((~p & g).sum())
    tn = int((~p & ~g).sum())
    fp = int((p & ~g).sum())
    if tp + fn == 0:
        raise UndefinedMetric("sensitivity is undefined for an empty ground truth")
    if tn + fp == 0:
        raise UndefinedMetric("specificity is undefined for a full ground truth")
    return tp / (tp + fn), tn / (tn + fp)


def class_metrics(pred, gt, num_classes: int, spacing=(1.0, 1.0, 1.0)) -> dict[int, dict]:
    """Per foreground class: dice, hd (None if undefined), sensitivity, specificity."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _same_shape(pred, gt)
    out = {}
    for k in range(1, num_classes):
        p, g = pred == k, gt == k
        row = {"dice": dice_score(pred, gt, k)}
        try:
            row["hd"] = hausdorff(p, g, spacing)
        except UndefinedMetric:
            row["hd"] = None
        try:
            row["sensitivity"], row["specificity"] = sens_spec(p, g)
        except UndefinedMetric:
            row["sensitivity"] = None
            row["specificity"] = float((~p & ~g).sum() / max((~g).sum(), 1))
        out[k] = row
    return out


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(per_case: list[dict[int, dict]], num_classes: int) -> dict:
    """Average per-case class metrics into per-class rows plus a mean row."""
    keys = ("dice", "hd", "sensitivity", "specificity")
    per_class = {}
    for k in range(1, num_classes):
        per_class[str(k)] = {m: _mean(case[k][m] for case in per_case) for m in keys}
    mean = {m: _mean(row[m] for row in per_class.values()) for m in keys}
    return {"per_class": per_class, "mean": mean, "hd_variant": "max (exact, surface voxels)"}


def write_report(path, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
