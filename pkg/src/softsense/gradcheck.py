"""Finite-difference oracles for verifying reverse-mode gradients."""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-4
FD_RTOL = 1e-4
FD_ATOL = 1e-6


def central_difference(f, arrays, h=FD_STEP):
    """Componentwise central-difference gradient of a scalar function.

    ``f`` takes one ndarray per entry of ``arrays`` and returns a float.
    Returns one gradient array per input, evaluated at the given point.
    """
    base = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads = []
    for i, a in enumerate(base):
        g = np.zeros_like(a)
        for j in range(a.size):
            hi = [b.copy() if k == i else b for k, b in enumerate(base)]
            lo = [b.copy() if k == i else b for k, b in enumerate(base)]
            hi[i].flat[j] += h
            lo[i].flat[j] -= h
            g.flat[j] = (f(*hi) - f(*lo)) / (2.0 * h)
        grads.append(g)
    return grads


def gradient_tolerance(numeric, analytic, rtol=FD_RTOL, atol=FD_ATOL):
    """Componentwise tolerance: the looser of relative and absolute bounds.

    The relative part uses the larger of the two magnitudes so the check is
    symmetric in which side is treated as the reference.
    """
    return np.maximum(rtol * np.maximum(np.abs(numeric), np.abs(analytic)), atol)


def max_violation(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL):
    """Largest excess of |analytic - numeric| over the tolerance; <= 0 passes."""
    worst = -np.inf
    for a, n in zip(analytic, numeric):
        tol = gradient_tolerance(n, a, rtol, atol)
        worst = max(worst, float(np.max(np.abs(a - n) - tol)))
    return worst


def assert_gradients_match(f, arrays, analytic, h=FD_STEP, rtol=FD_RTOL, atol=FD_ATOL):
    """Assert the analytic gradients of ``f`` agree with central differences."""
    numeric = central_difference(f, arrays, h=h)
    for idx, (a, n) in enumerate(zip(analytic, numeric)):
        tol = gradient_tolerance(n, a, rtol, atol)
        bad = np.abs(a - n) > tol
        if bad.any():
            where = np.argwhere(bad)[0]
            raise AssertionError(
                f"gradient mismatch in input {idx} at {tuple(where)}: "
                f"analytic={a[tuple(where)]:.6e} numeric={n[tuple(where)]:.6e}"
            )
