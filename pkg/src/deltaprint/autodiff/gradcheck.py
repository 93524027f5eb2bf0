"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ContractViolation, Tensor, backward


def gradcheck(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor],
              epsilon: float = 1e-5, rng: np.random.Generator | None = None,
              max_coords: int | None = None) -> float:
    """Compare analytic gradients of a scalar function against central
    differences (f(x+eps*e) - f(x-eps*e)) / 2eps, coordinate by coordinate.

    Every input with requires_grad is checked; when max_coords is set,
    that many coordinates per input are sampled with rng. Returns the
    max relative error with denominator max(|analytic|, |numeric|, 1e-8).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    if max_coords is not None and rng is None:
        rng = np.random.default_rng(0)

    for t in inputs:
        t.zero_grad()
    loss = f(*inputs)
    if loss.size != 1:
        raise ContractViolation("gradcheck requires a scalar-valued function")
    backward(loss)

    base = [t.data.copy() for t in inputs]
    worst = 0.0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        n = t.data.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        flat = t.data.reshape(-1)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + epsilon
            hi = _eval(f, inputs)
            flat[j] = orig - epsilon
            lo = _eval(f, inputs)
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        # restore exactly in case of accumulated float churn
        t.data[...] = base[i]
    return worst


def _eval(f, inputs) -> float:
    frozen = [Tensor(t.data) for t in inputs]
    return f(*frozen).item()
