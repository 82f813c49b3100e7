"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class ContractError(ValueError):
    pass


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over checked coordinates of ``|analytic - central_diff| / max(1, |analytic|)``.

    ``f`` closes over ``inputs`` and must return a scalar tensor. Inputs should be
    float64. ``max_coords`` limits the number of coordinates probed per input
    (chosen with ``rng``); by default every coordinate is checked.
    """
    for t in inputs:
        t.grad = None
    out = f()
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    for t in inputs:
        t.grad = None
    return worst
