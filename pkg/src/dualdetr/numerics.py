"""Scalar transforms, 1-D linear sampling and a finite-difference gradient checker.

Tensors and reverse-mode differentiation come from torch; everything here is
written against plain ``torch.Tensor`` so it composes with autograd.
"""
from __future__ import annotations

from typing import Callable

import torch

from .errors import EmptyInputError, NumericalError

INV_SIGMOID_EPS = 1e-5


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def inverse_sigmoid(y: torch.Tensor, eps: float = INV_SIGMOID_EPS) -> torch.Tensor:
    y = y.clamp(min=eps, max=1 - eps)
    return torch.log(y / (1 - y))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def sample_linear(values: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """Linearly interpolate rows of ``values`` at normalized positions.

    values: (..., T, C); pos: (..., P) with matching leading dims.
    Returns (..., P, C). Position p reads continuous row index p * (T - 1);
    positions outside [0, 1] read the boundary rows.
    """
    T = values.shape[-2]
    if T == 0:
        raise EmptyInputError("cannot sample from an empty sequence (T = 0)")
    idx = pos.clamp(0.0, 1.0) * (T - 1)
    i0 = idx.detach().floor().long().clamp(0, T - 1)
    i1 = (i0 + 1).clamp(max=T - 1)
    w = (idx - i0.to(idx.dtype)).unsqueeze(-1)
    C = values.shape[-1]
    g0 = torch.gather(values, -2, i0.unsqueeze(-1).expand(*i0.shape, C))
    g1 = torch.gather(values, -2, i1.unsqueeze(-1).expand(*i1.shape, C))
    return (1 - w) * g0 + w * g1


def linear_sample(X: torch.Tensor, t) -> torch.Tensor:
    """Sample a single C-vector from a T x C map at normalized position ``t``."""
    t = torch.as_tensor(t, dtype=X.dtype, device=X.device).reshape(1)
    return sample_linear(X, t)[0]


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
               h: float = 1e-5) -> float:
    """Max relative error between autograd and central differences of ``f`` at ``x``.

    The error per coordinate is |a - n| / max(1, |a|, |n|).
    """
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    y = f(x)
    if not torch.isfinite(y).all():
        raise NumericalError("f(x) is not finite")
    (analytic,) = torch.autograd.grad(y, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)

    flat = x.detach().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += h
            xm[i] -= h
            fp = f(xp.view_as(x))
            fm = f(xm.view_as(x))
            if not (torch.isfinite(fp) and torch.isfinite(fm)):
                raise NumericalError(f"f is not finite near coordinate {i}")
            numeric[i] = (fp - fm) / (2 * h)

    scale = torch.maximum(torch.ones_like(numeric),
                          torch.maximum(analytic.abs(), numeric.abs()))
    return float(((analytic - numeric).abs() / scale).max())


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {what}")
    return t
