"""Shared test helpers: finite-difference gradient checking and factories."""

from __future__ import annotations

import contextlib

import numpy as np

import marketpulse.tensor as tz


@contextlib.contextmanager
def dtype64():
    """Run a block with float64 tensors (finite differences need the bits)."""
    saved = tz.get_default_dtype()
    tz.set_default_dtype(np.float64)
    try:
        yield
    finally:
        tz.set_default_dtype(saved)


def fd_gradcheck(fn, leaves, eps: float = 1e-5, rtol: float = 1e-3,
                 atol: float = 1e-5, max_checks: int | None = None,
                 seed: int = 0) -> float:
    """Compare analytic gradients of the scalar ``fn()`` against central
    finite differences for every (or ``max_checks`` sampled) element of each
    leaf tensor. Returns the worst absolute-over-tolerance ratio observed and
    asserts it is <= 1. Call under ``dtype64``.
    """
    loss = fn()
    tz.backward(loss)
    grads = []
    for leaf in leaves:
        grads.append(np.zeros_like(leaf.data) if leaf.grad is None
                     else leaf.grad.copy())
        leaf.grad = None
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf, grad in zip(leaves, grads):
        flat = leaf.data.reshape(-1)
        gflat = grad.reshape(-1)
        if max_checks is not None and flat.size > max_checks:
            idxs = rng.choice(flat.size, size=max_checks, replace=False)
        else:
            idxs = np.arange(flat.size)
        for i in idxs:
            orig = flat[i]
            with tz.no_grad():
                flat[i] = orig + eps
                up = float(fn().data)
                flat[i] = orig - eps
                dn = float(fn().data)
            flat[i] = orig
            fd = (up - dn) / (2.0 * eps)
            tol = atol + rtol * max(abs(fd), abs(gflat[i]))
            ratio = abs(gflat[i] - fd) / tol
            worst = max(worst, ratio)
            assert ratio <= 1.0, (
                f"gradient mismatch at element {i}: analytic {gflat[i]:.8g} "
                f"vs finite-difference {fd:.8g} (tol {tol:.3g})")
    return worst


def rand_t(rng: np.random.Generator, *shape, scale: float = 1.0,
           requires_grad: bool = True) -> tz.Tensor:
    return tz.tensor(rng.standard_normal(shape) * scale,
                     requires_grad=requires_grad)


def random_window(rng: np.random.Generator, n: int, t: int, f: int = 29,
                  ) -> np.ndarray:
    """Feature window with per-column scale variety, shaped (n, t, f)."""
    scales = np.exp(rng.normal(0.0, 1.0, size=f))
    base = rng.standard_normal((n, t, f)) * scales
    drift = rng.standard_normal((n, 1, f)) * scales * 0.5
    return (base + drift).astype(np.float64)
