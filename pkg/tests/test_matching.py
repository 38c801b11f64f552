import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dualdetr.errors import MatchingError
from dualdetr.matching import (cost_matrix, focal_cost, hungarian, paired_tiou, pairwise_tiou,
                               tiou)

from oracles import best_assignment_cost, iou

f64 = torch.float64


def test_tiou_examples():
    assert tiou((0, 1), (0, 1)) == 1
    assert tiou((0, 0.5), (0.5, 1)) == 0
    assert tiou((0, 0.6), (0.4, 1.0)) == pytest.approx(0.2)
    assert tiou((0.3, 0.3), (0.3, 0.3)) == 1
    assert tiou((0.3, 0.3), (0.4, 0.4)) == 0
    with pytest.raises(ValueError):
        tiou((0.5, 0.4), (0, 1))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_tensor_tiou_matches_scalar(v):
    a, b = sorted(v[:2]), sorted(v[2:])
    expected = tiou(a, b)
    if a[1] - a[0] + b[1] - b[0] > 1e-6:
        got = pairwise_tiou(torch.tensor([a], dtype=f64), torch.tensor([b], dtype=f64)).item()
        assert got == pytest.approx(expected, abs=1e-9)
        assert paired_tiou(torch.tensor([a], dtype=f64), torch.tensor([b], dtype=f64)).item() \
            == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(iou(a, b), abs=1e-12)


def test_perfect_prediction_has_zero_localization_cost_and_lowest_total():
    gt, labels = torch.tensor([[0.2, 0.5]], dtype=f64), torch.tensor([0])
    logits = torch.tensor([[20.0, -20.0], [0.0, 0.0], [20.0, -20.0]], dtype=f64)
    pred = torch.tensor([[0.2, 0.5], [0.2, 0.5], [0.25, 0.5]], dtype=f64)
    loc = cost_matrix(logits[:1], pred[:1], gt, labels, weights=(0, 1, 1))
    assert loc.item() == pytest.approx(0.0, abs=1e-12)
    # the positive focal term vanishes; the subtracted negative term rewards confidence
    p = torch.sigmoid(torch.tensor(20.0, dtype=f64))
    assert 0.25 * (1 - p) ** 2 * -torch.log(p) < 1e-12
    c = cost_matrix(logits, pred, gt, labels)[:, 0]
    assert int(c.argmin()) == 0
    assert hungarian(c[:, None].numpy()).assignment.tolist() == [0, -1, -1]


def test_cost_of_disjoint_prediction():
    logits = torch.zeros(1, 1, dtype=f64)
    c = cost_matrix(logits, torch.tensor([[0.0, 0.5]], dtype=f64),
                    torch.tensor([[0.5, 1.0]], dtype=f64), torch.tensor([0]), weights=(0, 1, 0))
    assert c.item() == pytest.approx(1.0)
    c = cost_matrix(logits, torch.tensor([[0.0, 0.5]], dtype=f64),
                    torch.tensor([[0.5, 1.0]], dtype=f64), torch.tensor([0]), weights=(0, 0, 1))
    assert c.item() == pytest.approx(1.0)


def test_cost_combines_terms_with_weights():
    logits = torch.tensor([[0.3, -1.0]], dtype=f64)
    pred, gt = torch.tensor([[0.1, 0.4]], dtype=f64), torch.tensor([[0.2, 0.6]], dtype=f64)
    p = torch.sigmoid(logits[0, 1])
    c_cls = 0.25 * (1 - p) ** 2 * -torch.log(p) - 0.75 * p ** 2 * -torch.log(1 - p)
    c_iou = 1 - 0.2 / 0.5
    c_l1 = 0.1 + 0.2
    c = cost_matrix(logits, pred, gt, torch.tensor([1]))
    assert c.item() == pytest.approx(6 * float(c_cls) + 2 * c_iou + 5 * c_l1, abs=1e-6)


def test_cost_is_detached():
    logits = torch.randn(3, 2, dtype=f64, requires_grad=True)
    c = cost_matrix(logits, torch.rand(3, 2, dtype=f64).sort(-1).values,
                    torch.tensor([[0.1, 0.3]], dtype=f64), torch.tensor([1]))
    assert not c.requires_grad


def test_focal_cost_decreases_with_probability():
    p = torch.linspace(0.01, 0.99, 50, dtype=f64)
    assert (focal_cost(p).diff() < 0).all()


def test_hungarian_examples():
    m = hungarian([[1, 2], [2, 1]])
    assert m.assignment.tolist() == [0, 1] and m.total_cost == 2
    m = hungarian([[2, 1], [1, 2]])
    assert m.assignment.tolist() == [1, 0] and m.total_cost == 2


def test_hungarian_rectangular_leaves_queries_unmatched():
    m = hungarian([[5.0], [1.0], [3.0]])
    assert m.assignment.tolist() == [-1, 0, -1]
    assert len(m) == 1
    assert m.query_indices.tolist() == [1] and m.gt_indices.tolist() == [0]


def test_hungarian_errors():
    with pytest.raises(MatchingError):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(MatchingError):
        hungarian(np.array([[np.nan]]))


def test_hungarian_empty_ground_truth():
    m = hungarian(np.zeros((3, 0)))
    assert m.assignment.tolist() == [-1, -1, -1] and m.total_cost == 0


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 2**31))
def test_hungarian_matches_enumeration(n, m, seed):
    if m > n:
        n, m = m, n
    cost = np.random.default_rng(seed).uniform(-3, 3, size=(n, m))
    res = hungarian(cost)
    assert res.total_cost == pytest.approx(best_assignment_cost(cost.tolist()), abs=1e-9)
    matched = res.gt_indices.tolist()
    assert sorted(matched) == list(range(m))
    assert sum(cost[q, g] for q, g in zip(res.query_indices, res.gt_indices)) \
        == pytest.approx(res.total_cost, abs=1e-9)


def test_hungarian_handles_ties():
    res = hungarian(np.ones((4, 3)))
    assert res.total_cost == 3 and sorted(res.gt_indices.tolist()) == [0, 1, 2]


def test_assignment_invariant_under_weight_scaling():
    rng = np.random.default_rng(5)
    for _ in range(50):
        nq, ng = rng.integers(1, 6), None
        ng = int(rng.integers(1, nq + 1))
        logits = torch.from_numpy(rng.normal(size=(nq, 3)))
        pred = torch.from_numpy(np.sort(rng.uniform(size=(nq, 2)), -1))
        gt = torch.from_numpy(np.sort(rng.uniform(size=(ng, 2)), -1))
        labels = torch.from_numpy(rng.integers(0, 3, size=ng))
        base = cost_matrix(logits, pred, gt, labels).numpy()
        k = float(rng.uniform(0.1, 10))
        scaled = cost_matrix(logits, pred, gt, labels, (6 * k, 2 * k, 5 * k)).numpy()
        a, b = hungarian(base), hungarian(scaled)
        assert b.total_cost == pytest.approx(k * a.total_cost, rel=1e-9)
        assert scaled[b.query_indices, b.gt_indices].sum() / k == pytest.approx(a.total_cost, rel=1e-9)
