"""Finite-difference verification of tape gradients.

The oracle is central differences in double precision; it stays independent
of the closures it checks.
"""

from __future__ import annotations

import numpy as np

from .autodiff import EngineError, Tensor


def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Max relative error between analytic and numeric gradients.

    `fn` maps a list of Tensors to a scalar Tensor. Every input must be
    float64; the relative error per element is |a - f| / max(|a|, |f|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise EngineError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    arrays = []
    for t in inputs:
        if t.dtype != np.float64:
            raise EngineError("grad_check: inputs must be float64")
        arrays.append(t.data.copy())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = fn(leaves)
    loss.backward()
    analytic = [leaf.grad.copy() for leaf in leaves]

    def evaluate() -> float:
        return fn([Tensor(a) for a in arrays]).item()

    worst = 0.0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
        an = analytic[k].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(an), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(an - numeric) / denom)))
    return worst
