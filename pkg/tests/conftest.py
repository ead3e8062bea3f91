"""Shared gradient oracles for the test suite.

The finite-difference oracle runs in float64 (central differences, step
1e-3) so cancellation noise stays far below the asserted tolerances.
"""
from __future__ import annotations

import numpy as np


def finite_difference(forward, tensors, step=1e-3):
    """Central-difference gradients of scalar forward() w.r.t. each tensor.

    ``forward`` must rebuild its graph from the tensors' current .data on
    every call; tensors are expected to hold float64 data.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(forward().data)
            flat[i] = orig - step
            lo = float(forward().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-6)))


def gradcheck(make_case, seeds=range(10), tol=1e-4):
    """``make_case(rng)`` returns (tensors, forward) with forward() -> scalar
    Tensor rebuilt from the tensors' data.  Asserts analytic vs central
    finite differences over all seeds; returns the worst relative error."""
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        tensors, forward = make_case(rng)
        for t in tensors:
            t.zero_grad()
        forward().backward()
        fd = finite_difference(forward, tensors)
        for t, g in zip(tensors, fd):
            assert t.grad is not None, "no gradient reached a parameter"
            worst = max(worst, max_relative_error(t.grad, g))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e}"
    return worst
