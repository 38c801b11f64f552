"""Full detector: encoder, query construction, two-branch decoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import RunConfig
from .decoder import Decoder, DetectionSet, merge_detections
from .encoder import INIT_DURATION, Encoder, EncoderOutput, topk_indices
from .numerics import inverse_sigmoid
from .queries import DualQuerySet, content_widths, queries_from_proposals


@dataclass
class ModelOutput:
    enc: EncoderOutput
    enc_detections: DetectionSet
    layers: list[list[DetectionSet]]
    states: list[DualQuerySet]
    queries: DualQuerySet

    @property
    def final(self) -> DetectionSet:
        return merge_detections(self.layers[-1])


def _gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(*idx.shape, x.shape[-1]))


class LearnedQueries(nn.Module):
    """Sample-agnostic query content (and optionally positions) learned in training."""

    def __init__(self, n: int, wb: int, wi: int, positions: bool, seed_positions: torch.Tensor):
        super().__init__()
        self.i_con = nn.Parameter(torch.randn(n, wi) * 0.1) if wi else None
        self.s_con = nn.Parameter(torch.randn(n, wb) * 0.1) if wb else None
        self.e_con = nn.Parameter(torch.randn(n, wb) * 0.1) if wb else None
        self.i_logit = self.s_logit = self.e_logit = None
        if positions:
            centers = seed_positions
            dur = torch.full_like(centers, INIT_DURATION)
            if wi:
                self.i_logit = nn.Parameter(inverse_sigmoid(torch.stack([centers, dur], -1)))
            if wb:
                self.s_logit = nn.Parameter(inverse_sigmoid(centers - dur / 2))
                self.e_logit = nn.Parameter(inverse_sigmoid(centers + dur / 2))

    def content(self, B: int):
        ex = (lambda p: None if p is None else p.unsqueeze(0).expand(B, *p.shape))
        return ex(self.s_con), ex(self.e_con), ex(self.i_con)

    def full(self, B: int) -> DualQuerySet:
        s_con, e_con, i_con = self.content(B)
        ex = (lambda p: None if p is None else torch.sigmoid(p).unsqueeze(0).expand(B, *p.shape))
        return DualQuerySet(i_con=i_con, i_pos=ex(self.i_logit), s_con=s_con, e_con=e_con,
                            s_pos=ex(self.s_logit), e_pos=ex(self.e_logit))


class DualDETR(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate(check_paths=False)
        m, a = cfg.model, cfg.ablation
        self.cfg = cfg
        self.layout = cfg.layout
        self.num_queries = m.num_queries
        self.init_mode = a.init
        self.encoder = Encoder(m.d_model, m.enc_layers, m.heads, m.points, m.num_classes,
                               m.ffn_ratio * m.d_model)
        self.decoder = Decoder(m.d_model, m.dec_layers, m.heads, m.points, m.num_classes,
                               layout=self.layout, aligned=a.align == "on", refine=a.refine,
                               ffn_dim_ratio=m.ffn_ratio)
        self.learned = None
        if a.init != "joint":
            wb, wi = content_widths(m.d_model, self.layout)
            g = torch.Generator().manual_seed(cfg.train.seed)
            seeds = torch.rand(m.num_queries, generator=g) * 0.8 + 0.1
            self.learned = LearnedQueries(m.num_queries, wb, wi, a.init == "learned", seeds)

    def build_queries(self, enc: EncoderOutput, idx: torch.Tensor) -> DualQuerySet:
        B = idx.shape[0]
        if self.init_mode == "learned":
            return self.learned.full(B)
        intervals = _gather(enc.dense_proposals, idx).detach()
        feats = _gather(enc.x_enc, idx) if self.init_mode == "joint" else None
        q = queries_from_proposals(intervals, feats, self.layout, idx)
        if self.init_mode == "position-only":
            s_con, e_con, i_con = self.learned.content(B)
            q = q.replace(s_con=s_con if q.has_boundary else None,
                          e_con=e_con if q.has_boundary else None,
                          i_con=i_con if q.has_instance else None)
        return q

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> ModelOutput:
        enc = self.encoder(x, mask)
        idx = topk_indices(enc.dense_logits, self.num_queries, mask)
        enc_dets = DetectionSet(_gather(enc.dense_logits, idx), _gather(enc.dense_proposals, idx))
        q = self.build_queries(enc, idx)
        layers, states = self.decoder(q, enc, return_states=True)
        return ModelOutput(enc, enc_dets, layers, states, q)
