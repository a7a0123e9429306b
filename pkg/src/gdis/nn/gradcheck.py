"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def numeric_grad(fn, arrays, index: int, h: float = 1e-5) -> np.ndarray:
    """d fn(*arrays) / d arrays[index] by central differences; ``fn`` returns a float."""
    base = [np.array(a, dtype=float) for a in arrays]
    x = base[index]
    out = np.zeros_like(x)
    for pos in np.ndindex(x.shape):
        orig = x[pos]
        x[pos] = orig + h
        hi = fn(*base)
        x[pos] = orig - h
        lo = fn(*base)
        x[pos] = orig
        out[pos] = (hi - lo) / (2 * h)
    return out


def relative_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_gradients(build, arrays, h: float = 1e-5, weights=None) -> float:
    """Worst relative error between autodiff and finite differences.

    ``build(*tensors)`` maps leaf tensors to an output tensor. Non-scalar
    outputs are reduced with a fixed random weighting so every output entry
    contributes.
    """
    arrays = [np.array(a, dtype=float) for a in arrays]
    probe = build(*[Tensor(a) for a in arrays])
    if weights is None:
        weights = np.random.default_rng(12345).normal(size=probe.shape)

    def scalar(*vals):
        return float(np.sum(build(*[Tensor(v) for v in vals]).value * weights))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    build(*leaves).backward(np.asarray(weights, dtype=float))
    worst = 0.0
    for k, leaf in enumerate(leaves):
        worst = max(worst, relative_error(leaf.grad, numeric_grad(scalar, arrays, k, h)))
    return worst
