"""Two-branch decoder: boundary and instance layers, mutual refinement, heads."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import FFN, DeformableAttention, DeformAttnConfig, SelfAttention, sine_embed, span_embed
from .encoder import PRIOR_PROB, EncoderOutput, partition
from .errors import ConfigError
from .numerics import inverse_sigmoid
from .queries import DualQuerySet, boundary_pair

REFINE_MODES = ("parallel", "boundary-first", "instance-first", "off",
                "position-and-content", "last-layer")


@dataclass
class DetectionSet:
    """N predictions per window: interval (start, end) and per-class logits.

    ``boundary_intervals`` is set when an aligned boundary group shares the
    ground-truth assignment of the instance predictions.
    """
    logits: torch.Tensor                  # B, N, C
    intervals: torch.Tensor               # B, N, 2
    boundary_intervals: torch.Tensor | None = None

    @property
    def scores(self) -> torch.Tensor:
        return self.logits.sigmoid()

    def __len__(self):
        return self.logits.shape[1]


class MLP(nn.Module):
    """ReLU perceptron whose last layer starts at zero (zero offsets at init)."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int = 3):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


def class_head(in_dim: int, num_classes: int) -> nn.Linear:
    head = nn.Linear(in_dim, num_classes)
    nn.init.constant_(head.bias, float(inverse_sigmoid(torch.tensor(PRIOR_PROB))))
    return head


def refine_position(pos: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(delta + inverse_sigmoid(pos))


class _QueryBlock(nn.Module):
    """Self-attention, deformable cross-attention and FFN with post-norm residuals."""

    def __init__(self, width: int, heads: int, points: int, ffn_dim: int, n_cross: int = 1,
                 point_refs: bool = True):
        super().__init__()
        self.width = width
        self.self_attn = SelfAttention(width, heads)
        self.norm1 = nn.LayerNorm(width)
        self.cross = nn.ModuleList(
            DeformableAttention(DeformAttnConfig(width, heads, points), point_refs)
            for _ in range(n_cross))
        self.norm2 = nn.LayerNorm(width)
        self.ffn = FFN(width, ffn_dim)
        self.norm3 = nn.LayerNorm(width)

    def attend(self, con, pos_embed):
        return self.norm1(con + self.self_attn(con, pos_embed))

    def cross_ffn(self, con, pos_embed, ref, value, mask, which: int = 0):
        con = self.norm2(con + self.cross[which](con + pos_embed, ref, value, mask))
        return self.norm3(con + self.ffn(con))


class BoundaryLayer(nn.Module):
    """Start and end queries attend jointly, then read their own feature maps."""

    def __init__(self, width: int, hidden: int, heads: int, points: int, ffn_dim: int):
        super().__init__()
        self.block = _QueryBlock(width, heads, points, ffn_dim, n_cross=2)
        self.s_reg = MLP(width, hidden, 1)
        self.e_reg = MLP(width, hidden, 1)

    def forward(self, s_con, e_con, s_pos, e_pos, x_s, x_e, mask=None):
        N = s_con.shape[1]
        w = self.block.width
        con = torch.cat([s_con, e_con], dim=1)
        pe = sine_embed(torch.cat([s_pos, e_pos], dim=1), w)
        con = self.block.attend(con, pe)
        s_con, e_con = con[:, :N], con[:, N:]
        s_con = self.block.cross_ffn(s_con, pe[:, :N], s_pos, x_s, mask, 0)
        e_con = self.block.cross_ffn(e_con, pe[:, N:], e_pos, x_e, mask, 1)
        s_new = refine_position(s_pos, self.s_reg(s_con)[..., 0])
        e_new = refine_position(e_pos, self.e_reg(e_con)[..., 0])
        return s_con, e_con, s_new, e_new


class InstanceLayer(nn.Module):
    def __init__(self, width: int, hidden: int, heads: int, points: int, ffn_dim: int):
        super().__init__()
        self.block = _QueryBlock(width, heads, points, ffn_dim, point_refs=False)
        self.reg = MLP(width, hidden, 2)

    def forward(self, i_con, i_pos, x_i, mask=None):
        pe = span_embed(i_pos, self.block.width)
        i_con = self.block.attend(i_con, pe)
        i_con = self.block.cross_ffn(i_con, pe, i_pos, x_i, mask)
        return i_con, refine_position(i_pos, self.reg(i_con))


class SharedLayer(nn.Module):
    """One decoder for both groups on the unpartitioned map (simple-combine baseline)."""

    def __init__(self, width: int, hidden: int, heads: int, points: int, ffn_dim: int):
        super().__init__()
        self.block = _QueryBlock(width, heads, points, ffn_dim)
        self.b_reg = MLP(width, hidden, 1)
        self.i_reg = MLP(width, hidden, 2)

    def forward(self, q: DualQuerySet, x, mask=None):
        N = q.i_con.shape[1]
        w = self.block.width
        pe_s = sine_embed(q.s_pos, w)
        pe_e = sine_embed(q.e_pos, w)
        pe_i = span_embed(q.i_pos, w)
        con = self.block.attend(torch.cat([q.s_con, q.e_con, q.i_con], dim=1),
                                torch.cat([pe_s, pe_e, pe_i], dim=1))
        s_con, e_con, i_con = con[:, :N], con[:, N:2 * N], con[:, 2 * N:]
        s_con = self.block.cross_ffn(s_con, pe_s, q.s_pos, x, mask)
        e_con = self.block.cross_ffn(e_con, pe_e, q.e_pos, x, mask)
        i_con = self.block.cross_ffn(i_con, pe_i, q.i_pos, x, mask)
        return q.replace(
            s_con=s_con, e_con=e_con, i_con=i_con,
            s_pos=refine_position(q.s_pos, self.b_reg(s_con)[..., 0]),
            e_pos=refine_position(q.e_pos, self.b_reg(e_con)[..., 0]),
            i_pos=refine_position(q.i_pos, self.i_reg(i_con)))


def _boundary_from_instance(s, e, c, d):
    return (s + (c - d / 2)) / 2, (e + (c + d / 2)) / 2


def _instance_from_boundary(s, e, c, d):
    return (c + (s + e) / 2) / 2, (d + (e - s)) / 2


def mutual_refine_positions(s, e, c, d, mode: str = "parallel"):
    """Average each level's position toward the other level's; results clipped to [0, 1].

    Works on floats or tensors. ``parallel`` reads only pre-update values.
    """
    if mode == "parallel":
        c2, d2 = _instance_from_boundary(s, e, c, d)
        s2, e2 = _boundary_from_instance(s, e, c, d)
    elif mode == "boundary-first":
        s2, e2 = _boundary_from_instance(s, e, c, d)
        c2, d2 = _instance_from_boundary(s2, e2, c, d)
    elif mode == "instance-first":
        c2, d2 = _instance_from_boundary(s, e, c, d)
        s2, e2 = _boundary_from_instance(s, e, c2, d2)
    else:
        raise ConfigError(f"refine mode {mode!r} has no position update")
    if isinstance(s2, torch.Tensor):
        return tuple(v.clamp(0.0, 1.0) for v in (s2, e2, c2, d2))
    return tuple(min(max(v, 0.0), 1.0) for v in (s2, e2, c2, d2))


def mutual_refine(q: DualQuerySet, mode: str = "parallel") -> DualQuerySet:
    s, e, c, d = mutual_refine_positions(
        q.s_pos, q.e_pos, q.i_pos[..., 0], q.i_pos[..., 1],
        "parallel" if mode in ("position-and-content", "last-layer") else mode)
    return q.replace(s_pos=s, e_pos=e, i_pos=torch.stack([c, d], dim=-1))


class ContentExchange(nn.Module):
    """FFN over the concatenated aligned contents, split back per group."""

    def __init__(self, dim: int, ffn_dim: int):
        super().__init__()
        self.ffn = FFN(dim, ffn_dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, q: DualQuerySet) -> DualQuerySet:
        cat = torch.cat([q.s_con, q.e_con, q.i_con], dim=-1)
        cat = self.norm(cat + self.ffn(cat))
        wb = q.s_con.shape[-1]
        return q.replace(s_con=cat[..., :wb], e_con=cat[..., wb:2 * wb], i_con=cat[..., 2 * wb:])


def feature_maps(enc: EncoderOutput, layout: str):
    """(x_s, x_e, x_i) read by each branch under a decoder layout."""
    x = enc.x_enc
    if layout == "dual":
        return partition(x)
    if layout == "shared":
        return x, x, x
    if layout == "instance":
        return None, None, x
    if layout == "boundary":
        h = x.shape[-1] // 2
        return x[..., :h], x[..., h:], None
    raise ConfigError(f"unknown layout {layout!r}")


class Decoder(nn.Module):
    """Stack of decoder layers with per-layer detection heads.

    ``layout`` is one of dual, shared, instance, boundary. With ``aligned``
    the two groups of a dual layout share one detection set per layer.
    """

    def __init__(self, dim: int, num_layers: int, heads: int, points: int, num_classes: int,
                 layout: str = "dual", aligned: bool = True, refine: str = "parallel",
                 ffn_dim_ratio: int = 4):
        super().__init__()
        if refine not in REFINE_MODES:
            raise ConfigError(f"unknown refine mode {refine!r}")
        if refine != "off" and not (layout == "dual" and aligned):
            raise ConfigError("mutual refinement needs layout=dual with aligned queries")
        self.layout, self.aligned, self.refine = layout, aligned, refine
        self.num_layers = num_layers
        wb = {"dual": dim // 4, "shared": dim, "boundary": dim // 2, "instance": 0}[layout]
        wi = {"dual": dim // 2, "shared": dim, "boundary": 0, "instance": dim}[layout]
        self.wb, self.wi = wb, wi
        self.b_layers = self.i_layers = self.s_layers = None
        if layout == "shared":
            self.s_layers = nn.ModuleList(
                SharedLayer(dim, dim, heads, points, ffn_dim_ratio * dim) for _ in range(num_layers))
        if layout in ("dual", "boundary"):
            self.b_layers = nn.ModuleList(
                BoundaryLayer(wb, dim, heads, points, ffn_dim_ratio * wb) for _ in range(num_layers))
        if layout in ("dual", "instance"):
            self.i_layers = nn.ModuleList(
                InstanceLayer(wi, dim, heads, points, ffn_dim_ratio * wi) for _ in range(num_layers))
        self.i_heads = self.b_heads = None
        if wi:
            self.i_heads = nn.ModuleList(class_head(wi, num_classes) for _ in range(num_layers))
        if wb and not (layout == "dual" and aligned):
            self.b_heads = nn.ModuleList(class_head(2 * wb, num_classes) for _ in range(num_layers))
        self.exchange = None
        if refine == "position-and-content":
            self.exchange = nn.ModuleList(ContentExchange(dim, ffn_dim_ratio * dim)
                                          for _ in range(num_layers))

    def layer_step(self, l: int, q: DualQuerySet, maps, mask=None) -> DualQuerySet:
        x_s, x_e, x_i = maps
        if self.s_layers is not None:
            return self.s_layers[l](q, x_i, mask)
        if self.b_layers is not None:
            s_con, e_con, s_pos, e_pos = self.b_layers[l](
                q.s_con, q.e_con, q.s_pos, q.e_pos, x_s, x_e, mask)
            q = q.replace(s_con=s_con, e_con=e_con, s_pos=s_pos, e_pos=e_pos)
        if self.i_layers is not None:
            i_con, i_pos = self.i_layers[l](q.i_con, q.i_pos, x_i, mask)
            q = q.replace(i_con=i_con, i_pos=i_pos)
        return q

    def refines_at(self, l: int) -> bool:
        if self.refine == "off":
            return False
        if self.refine == "last-layer":
            return l == self.num_layers - 1
        return True

    def detections(self, l: int, q: DualQuerySet) -> list[DetectionSet]:
        if self.layout == "dual" and self.aligned:
            return [DetectionSet(self.i_heads[l](q.i_con), q.instance_intervals(),
                                 q.boundary_intervals())]
        out = []
        if self.i_heads is not None:
            out.append(DetectionSet(self.i_heads[l](q.i_con), q.instance_intervals()))
        if self.b_heads is not None:
            logits = self.b_heads[l](torch.cat([q.s_con, q.e_con], dim=-1))
            out.append(DetectionSet(logits, q.boundary_intervals()))
        return out

    def forward(self, q: DualQuerySet, enc: EncoderOutput, return_states: bool = False):
        maps = feature_maps(enc, self.layout)
        per_layer, states = [], []
        for l in range(self.num_layers):
            q = self.layer_step(l, q, maps, enc.mask)
            if self.refines_at(l):
                q = mutual_refine(q, self.refine)
                if self.exchange is not None:
                    q = self.exchange[l](q)
            per_layer.append(self.detections(l, q))
            states.append(q)
            # positions feed the next layer as fixed references
            q = q.replace(
                i_pos=None if q.i_pos is None else q.i_pos.detach(),
                s_pos=None if q.s_pos is None else q.s_pos.detach(),
                e_pos=None if q.e_pos is None else q.e_pos.detach())
        return (per_layer, states) if return_states else per_layer


def merge_detections(sets: list[DetectionSet]) -> DetectionSet:
    """Concatenate detection groups along the query axis (unaligned outputs)."""
    if len(sets) == 1:
        return sets[0]
    return DetectionSet(torch.cat([d.logits for d in sets], dim=1),
                        torch.cat([d.intervals for d in sets], dim=1))


def detection_head(q: DualQuerySet, head: nn.Linear) -> DetectionSet:
    return DetectionSet(head(q.i_con), q.instance_intervals(),
                        boundary_pair(q.s_pos, q.e_pos) if q.has_boundary else None)
