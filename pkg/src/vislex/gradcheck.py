"""Finite-difference verification of analytic gradients.

Central differences with h=1e-5 on float64 values, relative errors clamped
at 1e-8 in the denominator, pass threshold 1e-4. These margins leave enough
headroom that a genuine gradient bug is orders of magnitude away from the
tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward, mul, stop_gradient, tsum
from .errors import ContractError

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
_DENOM_CLAMP = 1e-8


@dataclass
class GradCheckReport:
    """Per-element comparison of analytic and finite-difference gradients."""

    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    max_rel_err: float
    tol: float
    h: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def finite_diff_check(f, x: Tensor, h: float = DEFAULT_H, tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Compare backward() gradients of f at x against central differences.

    f maps a Tensor to a Tensor. Non-scalar outputs are contracted with a
    fixed random weighting so a single backward pass checks J^T w. f must be
    deterministic; two forward passes are compared bitwise to detect
    violations.
    """
    probe_a = f(Tensor(x.data.copy(), requires_grad=False))
    probe_b = f(Tensor(x.data.copy(), requires_grad=False))
    if not np.array_equal(probe_a.data, probe_b.data):
        raise ContractError("finite_diff_check requires a deterministic function")

    if probe_a.data.size == 1:
        weights = np.ones_like(probe_a.data)
    else:
        weights = np.random.default_rng(0).standard_normal(probe_a.data.shape)

    def scalarize(t: Tensor) -> Tensor:
        if t.data.size == 1:
            return tsum(t)
        return tsum(mul(t, Tensor(weights.astype(t.dtype))))

    leaf = Tensor(x.data.copy(), requires_grad=True)
    backward(scalarize(f(leaf)))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    numeric = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        up = scalarize(f(Tensor(bumped.reshape(x.data.shape)))).item()
        bumped[i] = flat[i] - h
        down = scalarize(f(Tensor(bumped.reshape(x.data.shape)))).item()
        numeric.reshape(-1)[i] = (up - down) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _DENOM_CLAMP)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(
        analytic=np.asarray(analytic, dtype=np.float64),
        numeric=numeric,
        rel_err=rel,
        max_rel_err=float(rel.max()) if rel.size else 0.0,
        tol=tol,
        h=h,
    )


__all__ = ["GradCheckReport", "finite_diff_check", "DEFAULT_H", "DEFAULT_TOL", "stop_gradient"]
