"""Aligned instance/boundary query groups and their joint initialization."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import torch

from .encoder import EncoderProposal, spans_to_intervals
from .errors import ConfigError

INIT_MODES = ("joint", "position-only", "learned")


@dataclass
class DualQuerySet:
    """Batched query state; index k along dim 1 is one aligned proposal.

    Any group may be None when the corresponding level is disabled.
    """
    i_con: torch.Tensor | None = None   # B, N, Wi
    i_pos: torch.Tensor | None = None   # B, N, 2 (center, duration)
    s_con: torch.Tensor | None = None   # B, N, Wb
    e_con: torch.Tensor | None = None
    s_pos: torch.Tensor | None = None   # B, N
    e_pos: torch.Tensor | None = None
    source_index: torch.Tensor | None = None  # B, N provenance (encoder snippet)

    def replace(self, **kw) -> "DualQuerySet":
        return replace(self, **kw)

    @property
    def has_instance(self) -> bool:
        return self.i_pos is not None

    @property
    def has_boundary(self) -> bool:
        return self.s_pos is not None

    def instance_intervals(self) -> torch.Tensor:
        return spans_to_intervals(self.i_pos)

    def boundary_intervals(self) -> torch.Tensor:
        return boundary_pair(self.s_pos, self.e_pos)


def boundary_pair(s: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Ordered, clipped (start, end); an inverted pair is swapped, not stored swapped."""
    return torch.stack([torch.minimum(s, e), torch.maximum(s, e)], dim=-1).clamp(0.0, 1.0)


def content_widths(dim: int, layout: str) -> tuple[int, int]:
    """(boundary width, instance width) for a feature width and decoder layout."""
    if layout == "dual":
        return dim // 4, dim // 2
    if layout == "shared":
        return dim, dim
    if layout == "instance":
        return 0, dim
    if layout == "boundary":
        return dim // 2, 0
    raise ConfigError(f"unknown layout {layout!r}")


def split_content(features: torch.Tensor, layout: str):
    """Channel split of proposal features into (s_con, e_con, i_con).

    Uses the same channel layout as the encoder partition.
    """
    D = features.shape[-1]
    if layout == "dual":
        q = D // 4
        return features[..., :q], features[..., q:2 * q], features[..., 2 * q:]
    if layout == "shared":
        return features, features, features
    if layout == "instance":
        return None, None, features
    if layout == "boundary":
        h = D // 2
        return features[..., :h], features[..., h:], None
    raise ConfigError(f"unknown layout {layout!r}")


def queries_from_proposals(intervals: torch.Tensor, features: torch.Tensor | None,
                           layout: str, source_index: torch.Tensor | None = None) -> DualQuerySet:
    """Batched joint initialization: intervals (B, N, 2), features (B, N, D)."""
    if (intervals[..., 1] < intervals[..., 0]).any():
        raise ConfigError("proposal with end < start")
    s, e = intervals[..., 0], intervals[..., 1]
    spans = torch.stack([(s + e) / 2, e - s], dim=-1)
    s_con = e_con = i_con = None
    if features is not None:
        s_con, e_con, i_con = split_content(features, layout)
    q = DualQuerySet(source_index=source_index)
    if layout in ("dual", "shared", "instance"):
        q.i_pos, q.i_con = spans, i_con
    if layout in ("dual", "shared", "boundary"):
        q.s_pos, q.e_pos, q.s_con, q.e_con = s, e, s_con, e_con
    return q


def init_queries(selected: Sequence[EncoderProposal], mode: str = "joint",
                 layout: str = "dual", learned: DualQuerySet | None = None) -> DualQuerySet:
    """Build an unbatched-proposal query set (batch size 1).

    ``position-only`` and ``learned`` take their learned parts (content, or
    content and positions) from ``learned``.
    """
    if mode not in INIT_MODES:
        raise ConfigError(f"unknown init mode {mode!r}")
    for p in selected:
        if p.end < p.start:
            raise ConfigError(f"proposal {p.source_index} has end < start")
    if mode == "learned":
        if learned is None:
            raise ConfigError("learned init needs learned query parameters")
        return learned
    intervals = torch.tensor([[p.start, p.end] for p in selected], dtype=torch.float64)[None]
    src = torch.tensor([p.source_index for p in selected])[None]
    feats = None
    if mode == "joint":
        feats = torch.stack([p.feature for p in selected])[None]
    q = queries_from_proposals(intervals.to(feats.dtype if feats is not None else torch.float64),
                               feats, layout, src)
    if mode == "position-only":
        if learned is None:
            raise ConfigError("position-only init needs learned content")
        q = q.replace(i_con=learned.i_con, s_con=learned.s_con, e_con=learned.e_con)
    return q


def positions_to_interval(q: DualQuerySet, k: int, level: str, batch: int = 0) -> tuple[float, float]:
    if level == "instance":
        s, e = q.instance_intervals()[batch, k].tolist()
    elif level == "boundary":
        s, e = q.boundary_intervals()[batch, k].tolist()
    else:
        raise ConfigError(f"unknown level {level!r}")
    return s, e
