"""Temporal IoU, matching cost and optimal bipartite assignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import MatchingError

COST_WEIGHTS = (6.0, 2.0, 5.0)   # classification, IoU, L1


def tiou(a, b) -> float:
    """IoU of two (start, end) intervals. Identical points score 1, other empty unions 0."""
    (s1, e1), (s2, e2) = a, b
    if s1 > e1 or s2 > e2:
        raise ValueError(f"interval with start > end: {a}, {b}")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = max(e1, e2) - min(s1, s2)
    if union <= 0:
        return 1.0 if (s1 == s2 and e1 == e2) else 0.0
    return inter / union


def pairwise_tiou(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """IoU matrix between (N, 2) and (M, 2) interval tensors; differentiable."""
    inter = (torch.minimum(a[:, None, 1], b[None, :, 1])
             - torch.maximum(a[:, None, 0], b[None, :, 0])).clamp(min=0)
    union = (a[:, None, 1] - a[:, None, 0]) + (b[None, :, 1] - b[None, :, 0]) - inter
    return inter / union.clamp(min=eps)


def paired_tiou(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Elementwise IoU of (K, 2) interval tensors."""
    inter = (torch.minimum(a[:, 1], b[:, 1]) - torch.maximum(a[:, 0], b[:, 0])).clamp(min=0)
    union = (a[:, 1] - a[:, 0]) + (b[:, 1] - b[:, 0]) - inter
    return inter / union.clamp(min=eps)


def focal_cost(prob: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0,
               eps: float = 1e-8) -> torch.Tensor:
    """Positive-minus-negative focal terms of a class probability."""
    pos = alpha * (1 - prob) ** gamma * -(prob + eps).log()
    neg = (1 - alpha) * prob ** gamma * -(1 - prob + eps).log()
    return pos - neg


def cost_matrix(logits: torch.Tensor, intervals: torch.Tensor, gt_intervals: torch.Tensor,
                gt_labels: torch.Tensor, weights=COST_WEIGHTS, alpha: float = 0.25,
                gamma: float = 2.0) -> torch.Tensor:
    """(N_q, N_g) matching cost for one window; inputs are detached.

    logits: (N_q, C); intervals: (N_q, 2); gt_intervals: (N_g, 2); gt_labels: (N_g,).
    """
    w_cls, w_iou, w_l1 = weights
    with torch.no_grad():
        prob = logits.detach().sigmoid()[:, gt_labels.long()]
        c_cls = focal_cost(prob, alpha, gamma)
        pred = intervals.detach()
        c_iou = 1 - pairwise_tiou(pred, gt_intervals)
        c_l1 = torch.cdist(pred, gt_intervals.to(pred.dtype), p=1)
        return w_cls * c_cls + w_iou * c_iou + w_l1 * c_l1


@dataclass
class MatchResult:
    """``assignment[i]`` is the ground-truth index of query i, or -1 for no-action."""
    assignment: np.ndarray
    total_cost: float

    @property
    def query_indices(self) -> np.ndarray:
        return np.flatnonzero(self.assignment >= 0)

    @property
    def gt_indices(self) -> np.ndarray:
        return self.assignment[self.assignment >= 0]

    def __len__(self):
        return int((self.assignment >= 0).sum())


def _assign_rows(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path with potentials; cost (n, m), n <= m.

    Returns col_of_row (n,). O(n^2 m).
    """
    n, m = cost.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)      # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            cols = np.flatnonzero(free) + 1
            better = cur[cols - 1] < minv[cols]
            minv[cols[better]] = cur[cols - 1][better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[cols] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def hungarian(cost) -> MatchResult:
    """Minimum-cost assignment of every ground truth (column) to a distinct query (row).

    cost: (N_q, N_g) with N_q >= N_g.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost must be 2-D, got shape {cost.shape}")
    n_q, n_g = cost.shape
    if n_q < n_g:
        raise MatchingError(f"{n_g} ground truths cannot be matched to {n_q} queries")
    if not np.isfinite(cost).all():
        raise MatchingError("cost matrix has non-finite entries")
    assignment = np.full(n_q, -1, dtype=np.int64)
    if n_g == 0:
        return MatchResult(assignment, 0.0)
    query_of_gt = _assign_rows(cost.T)
    assignment[query_of_gt] = np.arange(n_g)
    return MatchResult(assignment, float(cost[query_of_gt, np.arange(n_g)].sum()))
