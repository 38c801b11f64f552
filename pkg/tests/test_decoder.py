import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from dualdetr.decoder import (BoundaryLayer, Decoder, DetectionSet, InstanceLayer, class_head,
                              detection_head, mutual_refine_positions, refine_position)
from dualdetr.errors import ConfigError
from dualdetr.losses import Targets, total_loss
from dualdetr.model import DualDETR
from dualdetr.numerics import grad_check
from dualdetr.queries import DualQuerySet

from conftest import micro_config, randomize

f64 = torch.float64
unit = st.floats(0, 1)


def model64(**overrides):
    torch.manual_seed(0)
    return DualDETR(micro_config(**overrides)).double()


def sample_targets(B=2):
    return [Targets(torch.tensor([[0.1, 0.4], [0.5, 0.8]], dtype=f64), torch.tensor([0, 1]))
            for _ in range(B)]


def test_refine_position_examples():
    assert refine_position(torch.tensor(0.3, dtype=f64), torch.tensor(0.0, dtype=f64)).item() \
        == pytest.approx(0.3, abs=1e-12)
    out = refine_position(torch.tensor(0.5, dtype=f64), torch.tensor(math.log(3), dtype=f64))
    assert out.item() == pytest.approx(0.75, abs=1e-12)


def test_fresh_layers_leave_positions_unchanged():
    g = torch.Generator().manual_seed(1)
    bl = BoundaryLayer(4, 16, 2, 2, 16).double()
    s, e = torch.tensor([[0.2, 0.6]], dtype=f64), torch.tensor([[0.5, 0.9]], dtype=f64)
    x = torch.randn(1, 9, 4, generator=g, dtype=f64)
    _, _, s2, e2 = bl(torch.randn(1, 2, 4, dtype=f64), torch.randn(1, 2, 4, dtype=f64), s, e, x, x)
    assert torch.allclose(s2, s, atol=1e-12) and torch.allclose(e2, e, atol=1e-12)
    il = InstanceLayer(8, 16, 2, 2, 16).double()
    pos = torch.tensor([[[0.4, 0.2], [0.7, 0.1]]], dtype=f64)
    _, pos2 = il(torch.randn(1, 2, 8, dtype=f64), pos, torch.randn(1, 9, 8, dtype=f64))
    assert torch.allclose(pos2, pos, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(unit, unit)
def test_mutual_refine_fixed_point(a, b):
    s, e = min(a, b), max(a, b)
    for mode in ("parallel", "boundary-first", "instance-first"):
        out = mutual_refine_positions(s, e, (s + e) / 2, e - s, mode)
        assert out == pytest.approx((s, e, (s + e) / 2, e - s), abs=1e-12)


def test_mutual_refine_hand_example():
    s, e, c, d = mutual_refine_positions(0.2, 0.6, 0.5, 0.5, "parallel")
    assert (s, e, c) == pytest.approx((0.225, 0.675, 0.45), abs=1e-15)
    # 0.45 is not representable; the computed value sits one ulp below it
    assert abs(d - 0.45) <= 1e-15


@settings(max_examples=200, deadline=None)
@given(unit, unit, unit, unit)
def test_mutual_refine_is_a_midpoint(s, e, c, d):
    s2, e2, c2, d2 = mutual_refine_positions(s, e, c, d, "parallel")
    assert min(s, c - d / 2) - 1e-12 <= s2 <= max(s, c - d / 2) + 1e-12 or s2 in (0.0, 1.0)
    assert min(e, c + d / 2) - 1e-12 <= e2 <= max(e, c + d / 2) + 1e-12 or e2 in (0.0, 1.0)
    assert min(c, (s + e) / 2) - 1e-12 <= c2 <= max(c, (s + e) / 2) + 1e-12
    for v in (s2, e2, c2, d2):
        assert 0.0 <= v <= 1.0


def test_mutual_refine_tensor_and_unknown_mode():
    t = torch.tensor([0.2, 0.6, 0.5, 0.5], dtype=f64)
    out = mutual_refine_positions(*t, "parallel")
    assert [float(v) for v in out] == pytest.approx([0.225, 0.675, 0.45, 0.45])
    with pytest.raises(ConfigError):
        mutual_refine_positions(0.1, 0.2, 0.3, 0.4, "off")


def test_zero_class_head_scores_one_half():
    head = class_head(4, 3)
    torch.nn.init.zeros_(head.weight)
    torch.nn.init.zeros_(head.bias)
    q = DualQuerySet(i_con=torch.randn(1, 5, 4), i_pos=torch.rand(1, 5, 2))
    det = detection_head(q, head)
    assert torch.allclose(det.scores, torch.full((1, 5, 3), 0.5))
    assert len(det) == 5


def test_detection_count_and_composition():
    m = model64()
    out = m(torch.randn(2, 12, 16, dtype=f64))
    assert len(out.layers) == 2
    for layer in out.layers:
        assert len(layer) == 1
        assert layer[0].logits.shape == (2, 4, 2)
    final = out.final
    q = out.states[-1]
    assert torch.allclose(final.intervals, q.instance_intervals())
    assert torch.allclose(final.boundary_intervals, q.boundary_intervals())


def test_positions_stay_in_unit_interval():
    m = randomize(model64(), 3, scale=2.0)
    for seed in range(5):
        out = m(torch.randn(2, 12, 16, dtype=f64, generator=torch.Generator().manual_seed(seed)) * 10)
        for q in out.states:
            for v in (q.s_pos, q.e_pos, q.i_pos):
                assert torch.isfinite(v).all() and (v >= 0).all() and (v <= 1).all()
        iv = out.final.intervals
        assert (iv[..., 0] <= iv[..., 1]).all()


def test_instance_level_has_no_boundary_modules():
    m = model64(ablation__level="instance", ablation__align="off", ablation__refine="off")
    names = [n for n, _ in m.named_parameters()]
    assert not any(n.startswith("decoder.b_") for n in names)
    out = m(torch.randn(1, 12, 16, dtype=f64))
    assert out.states[-1].s_pos is None


def test_unaligned_dual_emits_two_sets():
    m = model64(ablation__align="off", ablation__refine="off", ablation__init="learned")
    out = m(torch.randn(1, 12, 16, dtype=f64))
    assert len(out.layers[0]) == 2
    assert len(out.final) == 8


def test_decoder_rejects_refine_without_alignment():
    with pytest.raises(ConfigError):
        Decoder(16, 2, 2, 2, 2, layout="dual", aligned=False, refine="parallel")
    with pytest.raises(ConfigError):
        Decoder(16, 2, 2, 2, 2, refine="sometimes")


def _instance_only_loss(m, x):
    out = m(x)
    layers = [[DetectionSet(d.logits, d.intervals) for d in layer] for layer in out.layers]
    return total_loss(layers, None, sample_targets(x.shape[0])).total


def _boundary_grad(m):
    return sum(float(p.grad.abs().sum()) for n, p in m.named_parameters()
               if n.startswith("decoder.b_layers") and p.grad is not None)


def test_boundary_branch_only_learns_through_refinement():
    x = torch.randn(2, 12, 16, dtype=f64, generator=torch.Generator().manual_seed(4))
    off = randomize(model64(ablation__refine="off"), 5)
    _instance_only_loss(off, x).backward()
    assert _boundary_grad(off) == 0.0
    on = randomize(model64(ablation__refine="parallel"), 5)
    _instance_only_loss(on, x).backward()
    assert _boundary_grad(on) > 0.0


def test_every_parameter_receives_gradient_after_warmup():
    m = model64()
    x = torch.randn(2, 12, 16, dtype=f64, generator=torch.Generator().manual_seed(6))
    opt = torch.optim.AdamW(m.parameters(), lr=1e-2)
    for _ in range(3):
        opt.zero_grad()
        out = m(x)
        total_loss(out.layers, out.enc_detections, sample_targets()).total.backward()
        opt.step()
    opt.zero_grad()
    out = m(x)
    total_loss(out.layers, out.enc_detections, sample_targets()).total.backward()
    dead = [n for n, p in m.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    assert dead == []


def test_boundary_layer_gradients():
    bl = randomize(BoundaryLayer(4, 8, 2, 2, 8).double(), 7, 0.4)
    g = torch.Generator().manual_seed(8)
    s_con, e_con = (torch.randn(1, 3, 4, generator=g, dtype=f64) for _ in range(2))
    s = torch.rand(1, 3, generator=g, dtype=f64) * 0.5 + 0.1
    e = s + 0.3
    xs, xe = (torch.randn(1, 7, 4, generator=g, dtype=f64) for _ in range(2))

    def f(sc):
        a, b, sp, ep = bl(sc, e_con, s, e, xs, xe)
        return a.pow(2).sum() + b.sum() + sp.sum() + ep.pow(2).sum()

    assert grad_check(f, s_con) < 1e-4
    assert grad_check(lambda z: sum(t.sum() for t in bl(s_con, e_con, s, e, z, xe)), xs) < 1e-4


def test_instance_layer_gradients():
    il = randomize(InstanceLayer(8, 8, 2, 2, 8).double(), 9, 0.4)
    g = torch.Generator().manual_seed(10)
    con = torch.randn(1, 3, 8, generator=g, dtype=f64)
    pos = torch.rand(1, 3, 2, generator=g, dtype=f64) * 0.4 + 0.2
    x = torch.randn(1, 7, 8, generator=g, dtype=f64)
    assert grad_check(lambda z: sum(t.pow(2).sum() for t in il(z, pos, x)), con) < 1e-4
    assert grad_check(lambda z: sum(t.sum() for t in il(con, z, x)), pos) < 1e-4
