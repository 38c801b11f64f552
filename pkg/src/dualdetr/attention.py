"""Multi-head self-attention and 1-D deformable cross-attention."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, EmptyInputError
from .numerics import sample_linear, softmax

# Span (in normalized time) of one unit offset for point-referenced queries.
POINT_BASE_WINDOW = 0.05


@dataclass(frozen=True)
class DeformAttnConfig:
    channels: int
    heads: int = 8
    points: int = 4

    def __post_init__(self):
        if self.heads < 1 or self.points < 1 or self.channels < 1:
            raise ConfigError("heads, points and channels must be positive")
        if self.channels % self.heads:
            raise ConfigError(
                f"channels ({self.channels}) must be divisible by heads ({self.heads})")


def sine_embed(pos: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed sinusoidal embedding of normalized scalars: (...,) -> (..., dim)."""
    if dim % 2:
        raise ConfigError(f"sinusoidal embedding width must be even, got {dim}")
    half = dim // 2
    freq = temperature ** (torch.arange(half, dtype=pos.dtype, device=pos.device) / half)
    angle = pos.unsqueeze(-1) * (2 * math.pi) / freq
    return torch.cat([angle.sin(), angle.cos()], dim=-1)


def span_embed(span: torch.Tensor, dim: int) -> torch.Tensor:
    """Embed (..., 2) center/duration pairs; each coordinate gets half the width."""
    if dim % 4:
        raise ConfigError(f"span embedding width must be divisible by 4, got {dim}")
    return torch.cat([sine_embed(span[..., 0], dim // 2),
                      sine_embed(span[..., 1], dim // 2)], dim=-1)


class SelfAttention(nn.Module):
    """Scaled dot-product attention; queries/keys carry positions, values do not."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        DeformAttnConfig(dim, heads, 1)
        self.dim, self.heads = dim, heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, pos: torch.Tensor | None = None,
                key_mask: torch.Tensor | None = None, return_weights: bool = False):
        """x, pos: (B, N, C); key_mask: (B, N) with True for valid elements."""
        B, N, C = x.shape
        if N == 0:
            raise EmptyInputError("self-attention over an empty sequence")
        qk = x if pos is None else x + pos
        h, dh = self.heads, C // self.heads
        q = self.q_proj(qk).view(B, N, h, dh).transpose(1, 2)
        k = self.k_proj(qk).view(B, N, h, dh).transpose(1, 2)
        v = self.v_proj(x).view(B, N, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        out = self.out_proj(out)
        return (out, attn) if return_weights else out


class DeformableAttention(nn.Module):
    """1-D deformable attention over a single-scale T x C value map.

    A reference of shape (B, N) is a point (boundary queries, encoder
    snippets): offsets are scaled by a learned per-head factor times
    ``POINT_BASE_WINDOW``. A reference of shape (B, N, 2) is (center,
    duration): offsets are fractions of the duration around the center.
    """

    def __init__(self, cfg: DeformAttnConfig, point_refs: bool = True):
        super().__init__()
        self.cfg = cfg
        C, M, K = cfg.channels, cfg.heads, cfg.points
        self.value_proj = nn.Linear(C, C)
        self.offsets = nn.Linear(C, M * K)
        self.weights = nn.Linear(C, M * K)
        self.out_proj = nn.Linear(C, C)
        # only point-referenced modules own a scale
        self.point_scale = nn.Parameter(torch.ones(M)) if point_refs else None
        self.reset_parameters()

    def reset_parameters(self):
        M, K = self.cfg.heads, self.cfg.points
        nn.init.zeros_(self.offsets.weight)
        # heads look in alternating directions at growing distances
        direction = torch.tensor([1.0 if m % 2 == 0 else -1.0 for m in range(M)])
        spread = direction[:, None] * torch.arange(1, K + 1, dtype=torch.float32)[None, :]
        with torch.no_grad():
            self.offsets.bias.copy_(spread.reshape(-1))
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def sampling(self, query: torch.Tensor, ref: torch.Tensor):
        """Sampling locations (B, N, M, K) and weights (B, N, M, K)."""
        B, N, _ = query.shape
        M, K = self.cfg.heads, self.cfg.points
        off = self.offsets(query).view(B, N, M, K)
        attn = softmax(self.weights(query).view(B, N, M, K), dim=-1)
        if ref.dim() == 2:
            if self.point_scale is None:
                raise ConfigError("this attention module takes (center, duration) references")
            scale = self.point_scale.view(1, 1, M, 1) * POINT_BASE_WINDOW
            loc = ref[:, :, None, None] + off * scale
        elif ref.dim() == 3 and ref.shape[-1] == 2:
            center = ref[..., 0][:, :, None, None]
            dur = ref[..., 1][:, :, None, None]
            loc = center + off / K * dur * 0.5
        else:
            raise ConfigError(f"reference must be (B, N) or (B, N, 2), got {tuple(ref.shape)}")
        return loc, attn

    def forward(self, query: torch.Tensor, ref: torch.Tensor, value: torch.Tensor,
                value_mask: torch.Tensor | None = None) -> torch.Tensor:
        """query: (B, N, C); value: (B, T, C); value_mask: (B, T) True where valid."""
        C, M = self.cfg.channels, self.cfg.heads
        if query.shape[-1] != C or value.shape[-1] != C:
            raise ConfigError(
                f"channel mismatch: query {query.shape[-1]}, value {value.shape[-1]}, "
                f"configured {C}")
        B, T, _ = value.shape
        N = query.shape[1]
        v = self.value_proj(value)
        if value_mask is not None:
            v = v.masked_fill(~value_mask[..., None], 0.0)
        v = v.view(B, T, M, C // M).permute(0, 2, 1, 3)          # B, M, T, Ch
        loc, attn = self.sampling(query, ref)
        K = loc.shape[-1]
        loc = loc.permute(0, 2, 1, 3).reshape(B, M, N * K)       # B, M, N*K
        sampled = sample_linear(v, loc).view(B, M, N, K, C // M)
        w = attn.permute(0, 2, 1, 3).unsqueeze(-1)               # B, M, N, K, 1
        out = (w * sampled).sum(dim=3).permute(0, 2, 1, 3).reshape(B, N, C)
        return self.out_proj(out)


def deform_attn(z_q: torch.Tensor, t_q: torch.Tensor, X: torch.Tensor,
                module: DeformableAttention) -> torch.Tensor:
    """Single-query convenience wrapper: z_q (C,), t_q scalar or (2,), X (T, C)."""
    t_q = torch.as_tensor(t_q, dtype=X.dtype)
    ref = t_q.reshape(1, 1) if t_q.numel() == 1 else t_q.reshape(1, 1, 2)
    return module(z_q.reshape(1, 1, -1), ref, X.unsqueeze(0))[0, 0]


class FFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)
