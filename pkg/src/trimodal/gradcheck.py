"""Finite-difference verification of backward rules.

Runs in float64: callers promote their inputs (and module parameters)
before checking, otherwise the h**2 truncation error of the central
difference drowns in float32 rounding noise.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


def numeric_grad(f, x, eps=1e-5, entries=None):
    """Central-difference gradient of scalar-valued ``f`` at array ``x``.

    ``entries``: optional 1-d array of flat indices to probe (for large
    inputs); the returned array holds zeros elsewhere.
    """
    if not (1e-5 <= eps <= 1e-2):
        raise ValueError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    idxs = range(flat.size) if entries is None else np.asarray(entries, dtype=np.int64)
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_error(a, b, floor=1e-8):
    """max_i |a-b| / max(|a|, |b|, floor), elementwise then reduced."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_grad(build, x0, eps=1e-5, entries=None, rng=None, sample=None):
    """Compare analytic and numeric gradients of ``build`` at ``x0``.

    ``build(t)`` takes a Tensor and returns a scalar Tensor; it must be a
    pure function of its input.  Returns (rel_err, analytic, numeric).
    ``sample``: probe only this many randomly chosen entries (needs rng).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if sample is not None and entries is None:
        if rng is None:
            raise ValueError("sample requires an rng")
        n = min(sample, x0.size)
        entries = rng.choice(x0.size, size=n, replace=False)
    t = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    out = build(t)
    out.backward()
    analytic = t.grad.copy()
    numeric = numeric_grad(lambda arr: build(Tensor(arr, dtype=np.float64)).item(),
                           x0, eps=eps, entries=entries)
    if entries is not None:
        mask = np.zeros(x0.size, dtype=bool)
        mask[np.asarray(entries, dtype=np.int64)] = True
        a = analytic.reshape(-1)[mask]
        n_ = numeric.reshape(-1)[mask]
        return rel_error(a, n_), analytic, numeric
    return rel_error(analytic, numeric), analytic, numeric
