"""Deformable transformer encoder, auxiliary dense head and top-k proposal selection."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import FFN, DeformableAttention, DeformAttnConfig, sine_embed
from .errors import ConfigError, EmptyInputError
from .numerics import inverse_sigmoid

PRIOR_PROB = 0.01
INIT_DURATION = 0.1


def partition(x_enc: torch.Tensor):
    """Split channels into start [0, D/4), end [D/4, D/2) and instance [D/2, D)."""
    D = x_enc.shape[-1]
    if D % 4:
        raise ConfigError(f"feature width {D} is not divisible by 4")
    q = D // 4
    return x_enc[..., :q], x_enc[..., q:2 * q], x_enc[..., 2 * q:]


def normalized_grid(T: int, dtype=torch.float32, device=None) -> torch.Tensor:
    if T == 1:
        return torch.zeros(1, dtype=dtype, device=device)
    return torch.arange(T, dtype=dtype, device=device) / (T - 1)


def spans_to_intervals(spans: torch.Tensor) -> torch.Tensor:
    """(center, duration) -> (start, end), clipped to [0, 1]."""
    c, d = spans[..., 0], spans[..., 1]
    return torch.stack([c - d / 2, c + d / 2], dim=-1).clamp(0.0, 1.0)


@dataclass
class EncoderOutput:
    x_enc: torch.Tensor            # B, T, D
    dense_proposals: torch.Tensor  # B, T, 2 (start, end)
    dense_logits: torch.Tensor     # B, T, num_classes
    mask: torch.Tensor | None = None

    @property
    def dense_scores(self) -> torch.Tensor:
        return self.dense_logits.sigmoid()

    @property
    def parts(self):
        return partition(self.x_enc)


@dataclass
class EncoderProposal:
    start: float
    end: float
    score: float
    feature: torch.Tensor
    source_index: int


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, points: int, ffn_dim: int):
        super().__init__()
        self.attn = DeformableAttention(DeformAttnConfig(dim, heads, points))
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, pos, ref, mask=None):
        x = self.norm1(x + self.attn(x + pos, ref, x, mask))
        return self.norm2(x + self.ffn(x))


class DenseHead(nn.Module):
    """Per-snippet class logits and a (center, duration) proposal."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.cls = nn.Linear(dim, num_classes)
        self.reg = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 2))
        nn.init.constant_(self.cls.bias, float(inverse_sigmoid(torch.tensor(PRIOR_PROB))))
        nn.init.zeros_(self.reg[-1].weight)
        with torch.no_grad():
            self.reg[-1].bias.copy_(torch.tensor([0.0, float(inverse_sigmoid(torch.tensor(INIT_DURATION)))]))

    def forward(self, x_enc: torch.Tensor):
        B, T, _ = x_enc.shape
        logits = self.cls(x_enc)
        delta = self.reg(x_enc)
        grid = normalized_grid(T, x_enc.dtype, x_enc.device).expand(B, T)
        center = torch.sigmoid(inverse_sigmoid(grid) + delta[..., 0])
        duration = torch.sigmoid(delta[..., 1])
        proposals = spans_to_intervals(torch.stack([center, duration], dim=-1))
        return proposals, logits


class Encoder(nn.Module):
    def __init__(self, dim: int, num_layers: int, heads: int, points: int,
                 num_classes: int, ffn_dim: int | None = None):
        super().__init__()
        if dim % 4:
            raise ConfigError(f"model width {dim} is not divisible by 4")
        self.dim = dim
        self.layers = nn.ModuleList(
            EncoderLayer(dim, heads, points, ffn_dim or 4 * dim) for _ in range(num_layers))
        self.head = DenseHead(dim, num_classes)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> EncoderOutput:
        if x.dim() == 2:
            x = x.unsqueeze(0)
        B, T, D = x.shape
        if T == 0:
            raise EmptyInputError("empty feature sequence")
        if D != self.dim:
            raise ConfigError(f"feature width {D} does not match model width {self.dim}")
        grid = normalized_grid(T, x.dtype, x.device)
        pos = sine_embed(grid, D).expand(B, T, D)
        ref = grid.expand(B, T)
        for layer in self.layers:
            x = layer(x, pos, ref, mask)
        proposals, logits = self.head(x)
        return EncoderOutput(x, proposals, logits, mask)


def encode(x: torch.Tensor, encoder: Encoder, mask=None) -> EncoderOutput:
    return encoder(x, mask)


def topk_indices(scores: torch.Tensor, k: int, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Indices (B, k) of the k best positions by max class score; ties go to the lower index.

    scores: (B, T, C) probabilities or logits (ranking only).
    """
    B, T, _ = scores.shape
    if k > T:
        raise ConfigError(f"cannot select {k} proposals from {T} positions")
    key = scores.detach().amax(dim=-1)
    if mask is not None:
        key = key.masked_fill(~mask, float("-inf"))
    # stable descending sort keeps lower indices first among ties
    order = torch.sort(key, dim=-1, descending=True, stable=True).indices
    return order[:, :k]


def select_topk(proposals: torch.Tensor, scores: torch.Tensor, n_q: int,
                features: torch.Tensor | None = None) -> list[EncoderProposal]:
    """Unbatched selection: proposals (T, 2), scores (T, C), features (T, D)."""
    idx = topk_indices(scores.unsqueeze(0), n_q)[0]
    out = []
    for i in idx.tolist():
        s, e = proposals[i].tolist()
        out.append(EncoderProposal(
            s, e, float(scores[i].max()),
            features[i] if features is not None else None, i))
    return out
