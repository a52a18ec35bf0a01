"""Segmentation losses, bipartite matching and deep supervision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from vxf import functional as F
from vxf.tensor import Tensor

DICE_EPS = 1e-5


@dataclass
class GroundTruthSegments:
    """One binary mask per present foreground class (class 0 is background)."""

    masks: np.ndarray  # [S, V] in {0, 1}
    class_ids: np.ndarray  # [S], values in 1..K-1

    def __post_init__(self):
        self.masks = np.asarray(self.masks)
        self.class_ids = np.asarray(self.class_ids, dtype=int)
        if self.masks.ndim != 2:
            self.masks = self.masks.reshape(len(self.class_ids), -1)
        if len(self.masks) != len(self.class_ids):
            raise ValueError("one class id per mask required")
        if (self.class_ids < 1).any():
            raise ValueError("segment classes must be >= 1; class 0 is background")
        if len(self.masks) and (self.masks.sum(axis=1) == 0).any():
            raise ValueError("ground-truth segments must be nonempty")
        if len(self.masks) and (self.masks.sum(axis=0) > 1).any():
            raise ValueError("ground-truth segments overlap")

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: int) -> "GroundTruthSegments":
        flat = np.asarray(labels).reshape(-1).astype(int)
        if flat.size and (flat.min() < 0 or flat.max() >= num_classes):
            raise ValueError(f"labels outside 0..{num_classes - 1}")
        present = [k for k in range(1, num_classes) if (flat == k).any()]
        masks = np.stack([(flat == k) for k in present]).astype(np.uint8) if present \
            else np.zeros((0, flat.size), dtype=np.uint8)
        return cls(masks, np.array(present, dtype=int))

    def __len__(self) -> int:
        return len(self.class_ids)


@dataclass
class Assignment:
    """``pairs[i] = (query, segment)``, sorted by segment."""

    pairs: list[tuple[int, int]]
    cost: float
    unmatched_queries: list[int] = field(default_factory=list)


# ------------------------------------------------------------------ primitives
def dice_loss(pred_prob: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`` over the last axis."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred_prob.dtype)
    inter = (pred_prob * t).sum(axis=-1)
    denom = pred_prob.sum(axis=-1) + float(t.sum()) if t.ndim == 1 else pred_prob.sum(axis=-1) + t.sum(axis=-1)
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over the last axis, computed on logits."""
    return F.bce_with_logits(logits, target).mean(axis=-1)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=int)
    logp = F.log_softmax_lastdim(logits)
    return -logp[np.arange(len(targets)), targets]


# ------------------------------------------------------------------- matching
def _solve_rect(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path assignment of rows to distinct columns (rows <= cols).

    Returns ``col_of_row``.  Potentials-based Kuhn-Munkres, O(rows^2 cols).
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: 1-based row matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def _ordered_sum(cost: np.ndarray, cols) -> float:
    total = 0.0
    for s, n in enumerate(cols):
        total += float(cost[s, n])
    return total


def hungarian(cost) -> Assignment:
    """Minimum-cost injective assignment of segments (rows) to queries (columns).

    Among optimal assignments the lexicographically smallest
    ``(query of segment 0, query of segment 1, ...)`` is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    S, N = cost.shape
    if S > N:
        raise ValueError(f"more segments ({S}) than queries ({N})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    if S == 0:
        return Assignment([], 0.0, list(range(N)))
    best = _ordered_sum(cost, _solve_rect(cost))
    tol = 1e-9 * (1.0 + abs(best))
    chosen: list[int] = []
    prefix = 0.0
    for s in range(S):
        for n in range(N):
            if n in chosen:
                continue
            rest_cols = [j for j in range(N) if j not in chosen and j != n]
            rest = cost[s + 1:][:, rest_cols]
            tail = _ordered_sum(rest, _solve_rect(rest)) if len(rest) else 0.0
            if prefix + cost[s, n] + tail <= best + tol:
                chosen.append(n)
                prefix += cost[s, n]
                break
    pairs = [(n, s) for s, n in enumerate(chosen)]
    unmatched = [n for n in range(N) if n not in chosen]
    return Assignment(pairs, _ordered_sum(cost, chosen), unmatched)


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def matching_cost(mask_logits: np.ndarray, class_logits: np.ndarray, gt: GroundTruthSegments,
                  lambda0: float = 0.7, lambda1: float = 0.3) -> np.ndarray:
    """``[S, N]`` cost: ``lambda0 (BCE + Dice) + lambda1 CE`` of pairing query n with segment s."""
    x = np.asarray(mask_logits)
    t = gt.masks.astype(x.dtype)
    V = x.shape[1]
    bce = _softplus_np(x).mean(axis=1)[None, :] - (t @ x.T) / V
    p = expit(x)
    inter = t @ p.T
    dice = 1.0 - (2 * inter + DICE_EPS) / (t.sum(axis=1)[:, None] + p.sum(axis=1)[None, :] + DICE_EPS)
    o = np.asarray(class_logits, dtype=np.float64)
    o = o - o.max(axis=1, keepdims=True)
    logp = o - np.log(np.exp(o).sum(axis=1, keepdims=True))
    ce = -logp[:, gt.class_ids].T
    return (lambda0 * (bce + dice) + lambda1 * ce).astype(np.float64)


def matching_loss(mask_logits: Tensor, O: Tensor, gt: GroundTruthSegments,
                  lambda0: float = 0.7, lambda1: float = 0.3) -> tuple[Tensor, Assignment]:
    """Hungarian-matched set loss, averaged over queries.

    Matched queries pay ``lambda0 (BCE + Dice) + lambda1 CE(class)``;
    unmatched queries pay ``lambda1 CE(background)`` only.
    """
    N = mask_logits.shape[0]
    if N == 0:
        raise ValueError("matching loss needs at least one query")
    assignment = hungarian(matching_cost(mask_logits.data, O.data, gt, lambda0, lambda1))
    targets = np.zeros(N, dtype=int)
    for q, s in assignment.pairs:
        targets[q] = gt.class_ids[s]
    total = lambda1 * cross_entropy(O, targets).sum()
    if assignment.pairs:
        q_idx = np.array([q for q, _ in assignment.pairs])
        s_idx = np.array([s for _, s in assignment.pairs])
        matched = mask_logits[q_idx]
        tgt = gt.masks[s_idx].astype(mask_logits.dtype)
        mask_term = bce_loss(matched, tgt) + dice_loss(F.sigmoid(matched), tgt)
        total = total + lambda0 * mask_term.sum()
    return total * (1.0 / N), assignment


def hybrid_seg_loss(pixel_logits: Tensor, target_labels) -> Tensor:
    """Pixel cross-entropy plus mean soft Dice over foreground classes.

    ``pixel_logits`` is ``[K, V]``; ``target_labels`` holds ``V`` ints in ``0..K-1``.
    """
    K = pixel_logits.shape[0]
    labels = np.asarray(target_labels).reshape(-1).astype(int)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels outside 0..{K - 1}")
    x = pixel_logits.T  # [V, K]
    ce = cross_entropy(x, labels).mean()
    if K < 2:
        return ce
    onehot = np.eye(K, dtype=pixel_logits.dtype)[labels]
    prob = F.softmax_lastdim(x)
    fg_prob = prob[:, 1:].T
    dice = dice_loss(fg_prob, onehot[:, 1:].T).mean()
    return ce + dice


def deep_supervision(losses) -> Tensor:
    """Weighted sum of per-stage losses given finest first; weights halve per stage
    towards the coarsest and are normalized to sum to one."""
    losses = list(losses)
    if not losses:
        raise ValueError("deep supervision needs at least one stage loss")
    weights = 0.5 ** np.arange(len(losses))
    weights = weights / weights.sum()
    total = losses[0] * float(weights[0])
    for loss, w in zip(losses[1:], weights[1:]):
        total = total + loss * float(w)
    return total
