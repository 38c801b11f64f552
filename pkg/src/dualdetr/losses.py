"""Focal classification loss, localization losses and the per-layer set loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import LossConfig
from .decoder import DetectionSet
from .matching import MatchResult, cost_matrix, hungarian, paired_tiou

LOSS_WEIGHTS = (2.0, 2.0, 5.0)   # classification, IoU, L1


def focal_loss(p, y, alpha: float = 0.25, gamma: float = 2.0):
    """Elementwise focal loss on probabilities ``p`` against binary targets ``y``."""
    p = torch.as_tensor(p, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=p.dtype)
    p = p.clamp(1e-12, 1 - 1e-12)
    pos = -alpha * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * p ** gamma * torch.log(1 - p)
    return y * pos + (1 - y) * neg


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor,
                       alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Same loss as :func:`focal_loss`, evaluated stably from logits."""
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return a_t * (1 - p_t) ** gamma * ce


@dataclass
class Targets:
    """Ground truth of one window in normalized coordinates."""
    intervals: torch.Tensor   # N_g, 2
    labels: torch.Tensor      # N_g (int64)

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class LossTerms:
    cls: torch.Tensor
    iou: torch.Tensor
    l1: torch.Tensor

    def weighted(self, w) -> torch.Tensor:
        return w[0] * self.cls + w[1] * self.iou + w[2] * self.l1

    def __add__(self, other: "LossTerms") -> "LossTerms":
        return LossTerms(self.cls + other.cls, self.iou + other.iou, self.l1 + other.l1)

    def scaled(self, k: float) -> "LossTerms":
        return LossTerms(self.cls * k, self.iou * k, self.l1 * k)


@dataclass
class LossBreakdown:
    cls: float
    iou: float
    l1: float
    total: torch.Tensor
    per_layer: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"total": float(self.total.detach()), "cls": self.cls, "iou": self.iou, "l1": self.l1}


def share_targets(match: MatchResult):
    """One assignment for every aligned level: (query indices, ground-truth indices).

    The instance interval and the boundary pair at query k both regress to the
    same ground truth; unmatched queries get no localization target at either level.
    """
    q = match.query_indices
    return {"instance": (q, match.gt_indices), "boundary": (q, match.gt_indices)}


def window_loss(logits: torch.Tensor, intervals: torch.Tensor, targets: Targets,
                boundary_intervals: torch.Tensor | None = None,
                cfg: LossConfig | None = None) -> tuple[LossTerms, MatchResult]:
    """Set loss of one window's N_q predictions; matching on detached values."""
    cfg = cfg or LossConfig()
    n_q = logits.shape[0]
    n_g = len(targets)
    if n_g:
        cost = cost_matrix(logits, intervals, targets.intervals, targets.labels,
                           (cfg.cost_cls, cfg.cost_iou, cfg.cost_l1),
                           cfg.focal_alpha, cfg.focal_gamma)
        match = hungarian(cost.cpu().numpy())
    else:
        match = MatchResult(np.full(n_q, -1, dtype=np.int64), 0.0)
    norm = float(max(len(match), 1))
    onehot = torch.zeros_like(logits)
    shared = share_targets(match)
    q_idx, g_idx = (torch.as_tensor(a, dtype=torch.long) for a in shared["instance"])
    if len(q_idx):
        onehot[q_idx, targets.labels[g_idx].long()] = 1.0
    cls = sigmoid_focal_loss(logits, onehot, cfg.focal_alpha, cfg.focal_gamma).sum() / norm
    zero = logits.sum() * 0.0
    iou = l1 = zero
    if len(q_idx):
        gt = targets.intervals[g_idx].to(intervals.dtype)
        levels = [intervals] + ([boundary_intervals] if boundary_intervals is not None else [])
        for pred_all in levels:
            pred = pred_all[q_idx]
            iou = iou + (1 - paired_tiou(pred, gt)).sum() / norm
            l1 = l1 + (pred - gt).abs().sum() / norm
    return LossTerms(cls, iou, l1), match


def set_loss(det: DetectionSet, targets: Sequence[Targets], cfg: LossConfig) -> LossTerms:
    """Mean over windows of the per-window set loss for a batched DetectionSet."""
    total = None
    for b, t in enumerate(targets):
        terms, _ = window_loss(
            det.logits[b], det.intervals[b], t,
            None if det.boundary_intervals is None else det.boundary_intervals[b], cfg)
        total = terms if total is None else total + terms
    return total.scaled(1.0 / len(targets))


def total_loss(per_layer_preds: Sequence, encoder_preds: DetectionSet | None,
               targets: Sequence[Targets], cfg: LossConfig | None = None) -> LossBreakdown:
    """Weighted sum of decoder-layer losses plus the encoder auxiliary loss.

    ``per_layer_preds`` holds one DetectionSet per layer, or a list of
    DetectionSets per layer when the query groups are matched separately.
    """
    cfg = cfg or LossConfig()
    w = (cfg.loss_cls, cfg.loss_iou, cfg.loss_l1)
    stages = []
    for layer in per_layer_preds:
        sets = layer if isinstance(layer, (list, tuple)) else [layer]
        terms = None
        for det in sets:
            t = set_loss(det, targets, cfg)
            terms = t if terms is None else terms + t
        stages.append(("decoder", terms))
    if encoder_preds is not None:
        stages.append(("encoder", set_loss(encoder_preds, targets, cfg)))
    agg = stages[0][1]
    for _, t in stages[1:]:
        agg = agg + t
    total = sum(t.weighted(w) for _, t in stages)
    f = (lambda v: float(v.detach()))
    per_layer = [{"stage": name, "cls": f(t.cls), "iou": f(t.iou), "l1": f(t.l1),
                  "total": f(t.weighted(w))} for name, t in stages]
    return LossBreakdown(f(agg.cls), f(agg.iou), f(agg.l1), total, per_layer)
