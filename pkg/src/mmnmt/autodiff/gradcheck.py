"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Parameter, Tape, Tensor, backward, no_record


@dataclass
class GradCheckResult:
    max_rel_error: float
    param: Optional[str]
    index: Optional[tuple]
    ok: bool
    n_coords: int
    failure: Optional[str] = None

    def __str__(self):
        if self.failure:
            return f"FAIL {self.failure}"
        return (f"max relative error {self.max_rel_error:.3e} at {self.param}{list(self.index or ())} "
                f"over {self.n_coords} coordinates")


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Parameter]) -> dict:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    return {p.name: p.grad.copy() for p in params}


def numeric_grad(loss_fn: Callable[[], Tensor], param: Parameter, epsilon: float = 1e-5):
    """Central differences for every coordinate of ``param``.

    Returns (grad, failure) where failure names the first non-finite evaluation.
    """
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = loss_fn().item()
            flat[i] = orig - epsilon
            fm = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                idx = np.unravel_index(i, param.shape)
                return grad, f"non-finite loss perturbing {param.name}{list(idx)} (+/-{epsilon})"
            grad.reshape(-1)[i] = (fp - fm) / (2.0 * epsilon)
    return grad, None


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
               epsilon: float = 1e-5, tol: float = 1e-4) -> GradCheckResult:
    """Compare backprop gradients with central differences, coordinate by coordinate.

    All parameters must be float64. The relative error per coordinate is
    |a - n| / max(1, |a|, |n|); the worst one is reported.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 parameters; {p.name} is {p.dtype}")
    with no_record():
        base = loss_fn().item()
    if not np.isfinite(base):
        return GradCheckResult(float("inf"), None, None, False, 0, "non-finite loss at the base point")
    analytic = analytic_grads(loss_fn, params)
    worst, worst_name, worst_idx, count = 0.0, None, None, 0
    for p in params:
        num, failure = numeric_grad(loss_fn, p, epsilon)
        if failure:
            return GradCheckResult(float("inf"), p.name, None, False, count, failure)
        err = relative_error(analytic[p.name], num)
        count += err.size
        k = int(np.argmax(err))
        if err.reshape(-1)[k] > worst or worst_name is None:
            worst = float(err.reshape(-1)[k])
            worst_name, worst_idx = p.name, tuple(int(i) for i in np.unravel_index(k, p.shape))
    return GradCheckResult(worst, worst_name, worst_idx, worst <= tol, count)
