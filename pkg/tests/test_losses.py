import math

import numpy as np
import pytest
import torch
from torch.func import functional_call

from dualdetr.config import LossConfig
from dualdetr.decoder import DetectionSet
from dualdetr.losses import (LOSS_WEIGHTS, Targets, focal_loss, share_targets,
                             sigmoid_focal_loss, total_loss, window_loss)
from dualdetr.matching import MatchResult
from dualdetr.model import DualDETR
from dualdetr.numerics import grad_check

from conftest import micro_config, randomize

f64 = torch.float64


def test_focal_values():
    assert focal_loss(0.5, 1).item() == pytest.approx(-0.25 * 0.25 * math.log(0.5), abs=1e-12)
    assert focal_loss(0.5, 1).item() == pytest.approx(0.04332, abs=1e-5)
    assert focal_loss(0.5, 0).item() == pytest.approx(0.12996, abs=1e-5)
    assert focal_loss(1 - 1e-9, 1).item() < 1e-15
    assert focal_loss(1e-9, 0).item() < 1e-15


def test_focal_monotonicity():
    p = torch.linspace(0.001, 0.999, 200, dtype=f64)
    assert (focal_loss(p, 1).diff() < 0).all()
    assert (focal_loss(p, 0).diff() > 0).all()


def test_logit_and_probability_forms_agree():
    logits = torch.linspace(-8, 8, 41, dtype=f64)
    for y in (0.0, 1.0):
        a = sigmoid_focal_loss(logits, torch.full_like(logits, y))
        b = focal_loss(torch.sigmoid(logits), y)
        assert torch.allclose(a, b, atol=1e-12)


def test_default_weights():
    cfg = LossConfig()
    assert (cfg.loss_cls, cfg.loss_iou, cfg.loss_l1) == LOSS_WEIGHTS == (2, 2, 5)


def test_no_ground_truth_gives_classification_only():
    logits = torch.randn(4, 3, dtype=f64)
    intervals = torch.rand(4, 2, dtype=f64).sort(-1).values
    terms, match = window_loss(logits, intervals, Targets(torch.zeros(0, 2, dtype=f64),
                                                          torch.zeros(0, dtype=torch.long)))
    assert terms.iou.item() == 0 and terms.l1.item() == 0
    expected = sigmoid_focal_loss(logits, torch.zeros_like(logits)).sum()
    assert terms.cls.item() == pytest.approx(expected.item())
    assert len(match) == 0


def test_perfect_prediction_has_near_zero_loss():
    gt = Targets(torch.tensor([[0.1, 0.3], [0.5, 0.9]], dtype=f64), torch.tensor([1, 0]))
    logits = torch.full((3, 2), -30.0, dtype=f64)
    logits[0, 1] = logits[2, 0] = 30.0
    intervals = torch.tensor([[0.1, 0.3], [0.0, 1.0], [0.5, 0.9]], dtype=f64)
    terms, match = window_loss(logits, intervals, gt, boundary_intervals=intervals.clone())
    assert match.assignment.tolist() == [0, -1, 1]
    assert terms.iou.item() == pytest.approx(0, abs=1e-12)
    assert terms.l1.item() == pytest.approx(0, abs=1e-12)
    assert terms.cls.item() < 1e-12


def test_normalization_by_matched_count():
    gt = Targets(torch.tensor([[0.1, 0.3], [0.5, 0.9]], dtype=f64), torch.tensor([0, 0]))
    logits = torch.zeros(2, 1, dtype=f64)
    intervals = torch.tensor([[0.1, 0.2], [0.5, 0.8]], dtype=f64)
    terms, _ = window_loss(logits, intervals, gt)
    assert terms.l1.item() == pytest.approx((0.1 + 0.1) / 2)
    assert terms.cls.item() == pytest.approx(2 * focal_loss(0.5, 1).item() / 2)


def test_boundary_level_gets_same_target():
    gt = Targets(torch.tensor([[0.2, 0.6]], dtype=f64), torch.tensor([0]))
    logits = torch.zeros(1, 1, dtype=f64)
    inst = torch.tensor([[0.2, 0.6]], dtype=f64)
    bnd = torch.tensor([[0.1, 0.6]], dtype=f64)
    terms, _ = window_loss(logits, inst, gt, boundary_intervals=bnd)
    assert terms.l1.item() == pytest.approx(0.1)
    assert terms.iou.item() == pytest.approx(1 - 0.4 / 0.5)


def test_share_targets_single_source():
    match = MatchResult(np.array([2, -1, 0, 1]), 1.0)
    shared = share_targets(match)
    for level in ("instance", "boundary"):
        q, g = shared[level]
        assert q.tolist() == [0, 2, 3] and g.tolist() == [2, 0, 1]
    assert np.array_equal(shared["instance"][1], shared["boundary"][1])


def _det(seed, B=2, N=3, C=2):
    g = torch.Generator().manual_seed(seed)
    return DetectionSet(torch.randn(B, N, C, generator=g, dtype=f64),
                        torch.rand(B, N, 2, generator=g, dtype=f64).sort(-1).values,
                        torch.rand(B, N, 2, generator=g, dtype=f64).sort(-1).values)


def _targets():
    return [Targets(torch.tensor([[0.1, 0.4]], dtype=f64), torch.tensor([1])),
            Targets(torch.tensor([[0.2, 0.3], [0.6, 0.95]], dtype=f64), torch.tensor([0, 1]))]


def test_doubling_layers_doubles_loss():
    det = _det(0)
    one = total_loss([det], None, _targets()).total
    two = total_loss([det, det], None, _targets()).total
    assert two.item() == pytest.approx(2 * one.item(), rel=1e-12)


def test_breakdown_consistency():
    out = total_loss([_det(1), _det(2)], _det(3), _targets())
    w = LOSS_WEIGHTS
    assert out.total.item() == pytest.approx(w[0] * out.cls + w[1] * out.iou + w[2] * out.l1)
    assert len(out.per_layer) == 3 and out.per_layer[-1]["stage"] == "encoder"
    assert sum(r["total"] for r in out.per_layer) == pytest.approx(out.total.item())
    assert min(out.cls, out.iou, out.l1) >= 0


def test_total_loss_gradient_micro_instance():
    torch.manual_seed(0)
    m = randomize(DualDETR(micro_config(model__num_queries=2)).double(), 12, 0.3)
    x = torch.randn(1, 12, 16, dtype=f64, generator=torch.Generator().manual_seed(13))
    targets = [Targets(torch.tensor([[0.3, 0.6]], dtype=f64), torch.tensor([1]))]
    params = {n: p.detach() for n, p in m.named_parameters()}

    def loss_with(name):
        def f(v):
            out = functional_call(m, {**params, name: v}, (x,))
            return total_loss(out.layers, out.enc_detections, targets).total
        return f

    for name in ("decoder.i_heads.1.weight", "decoder.i_layers.1.reg.layers.2.weight",
                 "decoder.b_layers.1.s_reg.layers.2.weight", "encoder.head.cls.weight"):
        assert grad_check(loss_with(name), params[name]) < 1e-3, name
