"""Gaussian kernels with the median-distance bandwidth, and the HSIC statistic."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, _as_tensor, _make, center, mul, scale, total

MIN_BANDWIDTH = 1e-8


def _sq_dists(v: np.ndarray) -> np.ndarray:
    sq = np.sum(v * v, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (v @ v.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def median_bandwidth(values) -> float:
    """Median off-diagonal Euclidean distance, floored at ``MIN_BANDWIDTH``."""
    v = np.asarray(values.value if isinstance(values, Tensor) else values, dtype=float)
    m = v.shape[0]
    d = np.sqrt(_sq_dists(v)[np.triu_indices(m, k=1)])
    return max(float(np.median(d)), MIN_BANDWIDTH) if d.size else MIN_BANDWIDTH


def gaussian_kernel(M, bandwidth: float | None = None) -> Tensor:
    """K_il = exp(-|M_i - M_l|^2 / (2 gamma^2)).

    ``gamma`` defaults to the median heuristic on the detached input, so no
    gradient flows through the bandwidth.
    """
    M = _as_tensor(M)
    if M.value.ndim != 2 or M.shape[0] < 2:
        raise ValueError(f"gaussian_kernel needs at least two rows, got {M.shape}")
    gamma = median_bandwidth(M.value) if bandwidth is None else max(float(bandwidth), MIN_BANDWIDTH)
    mv = M.value
    k = np.exp(-_sq_dists(mv) / (2.0 * gamma * gamma))
    np.fill_diagonal(k, 1.0)

    def back(g):
        s = g * k * (-1.0 / (2.0 * gamma * gamma))
        s = s + s.T
        return (2.0 * (s.sum(axis=1)[:, None] * mv - s @ mv),)

    return _make(k, (M,), back, "gaussian_kernel")


def hsic(H, H_prime, bandwidths=(None, None)) -> Tensor:
    """trace(K_H C K_H' C) / (m - 1)^2 with Gaussian kernels on both inputs.

    Each kernel uses the median heuristic on its own input unless a bandwidth
    is given; either way the bandwidth is treated as a constant when
    differentiating.
    """
    H, H_prime = _as_tensor(H), _as_tensor(H_prime)
    m = H.shape[0]
    if H_prime.shape[0] != m:
        raise ValueError(f"hsic: row mismatch {H.shape} vs {H_prime.shape}")
    if m < 2:
        raise ValueError("hsic needs at least two samples")
    # trace(K C L C) = sum(K * (C L C)) for symmetric K, L
    k_h = gaussian_kernel(H, bandwidths[0])
    k_hp = gaussian_kernel(H_prime, bandwidths[1])
    return scale(total(mul(k_h, center(k_hp))),
                 1.0 / (m - 1) ** 2)
