"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CheckError
from .rng import RngState
from .tensor import Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    errors: dict = field(default_factory=dict)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel-err {self.max_rel_error:.3e} (tol {self.tolerance:g})"


def _eval(f, inputs) -> float:
    out = f(*inputs)
    value = np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64)
    if value.size != 1:
        raise CheckError(f"function must be scalar-valued, got shape {value.shape}")
    value = float(value.reshape(()))
    if not np.isfinite(value):
        raise CheckError("function produced a non-finite value")
    return value


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-4,
               h: float = 1e-5, max_entries: int | None = None,
               rng: RngState | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of each input is ``|g_a - g_n| / max(|g_a|, |g_n|)``
    taken over the gradient vectors as a whole (2-norms), which stays
    meaningful when individual entries are near zero.  The denominator is
    at least ``floor`` so a gradient that is exactly zero (a parameter the
    output is invariant to) is not judged by finite-difference round-off.  ``max_entries`` limits
    the coordinates perturbed per input; the subset is drawn from ``rng``.
    Inputs should be float64.
    """
    for x in inputs:
        if x.data.dtype != np.float64:
            raise CheckError("gradient checks require float64 inputs")
        x.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise CheckError(f"function must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise CheckError("function produced a non-finite value")
    out.backward()

    rng = rng or RngState(0)
    errors = {}
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        x.data = np.ascontiguousarray(x.data)
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, max_entries))
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            plus = _eval(f, inputs)
            flat[c] = orig - h
            minus = _eval(f, inputs)
            flat[c] = orig
            numeric[j] = (plus - minus) / (2 * h)
        a = analytic.reshape(-1)[coords]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), floor)
        errors[i] = float(np.linalg.norm(a - numeric) / scale)
    worst = max(errors.values(), default=0.0)
    for x in inputs:
        x.grad = None
    return GradCheckReport(worst < tolerance, worst, tolerance, errors)
