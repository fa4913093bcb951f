"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor

# Gradients smaller than this are compared absolutely: at step 1e-5 the
# round-off in a central difference of an O(1) loss is already ~1e-10.
DENOM_FLOOR = 1e-6
# one-sided slopes disagreeing by more than this (relative) mark a kink; a
# smooth function would need |f''| > 100 |f'| at step 1e-5 to trip it
KINK_TOL = 1e-3
REFINE = 10.0


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    kinks: int


def _probe(fn, flat, c, step, f0):
    old = flat[c]
    flat[c] = old + step
    up = float(fn().data)
    flat[c] = old - step
    down = float(fn().data)
    flat[c] = old
    fwd, bwd = (up - f0) / step, (f0 - down) / step
    kink = abs(fwd - bwd) > KINK_TOL * max(abs(fwd), abs(bwd), 1.0)
    return (up - down) / (2 * step), kink


def grad_check_detail(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5,
                      samples: int | None = 20, seed: int = 0) -> GradCheckResult:
    """Compare backward gradients with central differences.

    ``fn`` builds a scalar from the current values of ``tensors``. At most
    ``samples`` coordinates per tensor are probed (all when ``None``).
    Where the step straddles a non-differentiable point (ReLU or |x|
    switching) the coordinate is re-probed with a step ``REFINE`` times
    smaller, and skipped (counted in ``kinks``) if it still straddles one.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    f0 = float(out.data)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    worst, checked, kinks = 0.0, 0, 0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if samples is not None and flat.size > samples:
            coords = rng.choice(flat.size, size=samples, replace=False)
        for c in coords:
            num, kink = _probe(fn, flat, c, step, f0)
            if kink:
                num, kink = _probe(fn, flat, c, step / REFINE, f0)
            if kink:
                kinks += 1
                continue
            a = float(ga.reshape(-1)[c])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), DENOM_FLOOR))
            checked += 1
    for t in tensors:
        t.grad = None
    return GradCheckResult(worst, checked, kinks)


def grad_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5,
               samples: int | None = 20, seed: int = 0) -> float:
    """Max relative error (see ``grad_check_detail``)."""
    return grad_check_detail(fn, tensors, step, samples, seed).max_rel_error


def random_projection(out: Tensor, seed: int = 0) -> np.ndarray:
    """Fixed random weights turning a tensor into a scalar for checking."""
    return np.random.default_rng(seed).standard_normal(out.shape)
