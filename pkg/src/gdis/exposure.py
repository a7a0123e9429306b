"""KL-divergence influence weights and aggregated neighbour exposures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import Network

DEFAULT_EPS = 1e-6


def normalize_features(row, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Turn a real feature row into a probability vector.

    The row is shifted so its minimum is at least zero, floored by ``eps`` and
    normalised. A row that is all zero after shifting (with ``eps == 0``) maps to
    the uniform distribution.
    """
    row = np.asarray(row, dtype=float)
    if row.ndim != 1 or row.size == 0:
        raise ValueError("feature row must be a non-empty vector")
    if not np.all(np.isfinite(row)):
        raise ValueError("feature row must be finite")
    shifted = row - min(row.min(), 0.0) + eps
    total = shifted.sum()
    if total <= 0:
        return np.full(row.size, 1.0 / row.size)
    return shifted / total


def _normalize_rows(features, eps):
    shifted = features - np.minimum(features.min(axis=1, keepdims=True), 0.0) + eps
    totals = shifted.sum(axis=1, keepdims=True)
    uniform = np.full_like(shifted, 1.0 / features.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, shifted / np.where(totals > 0, totals, 1.0), uniform)


def kl_divergence(p, q) -> float:
    """D(p || q) in nats. Zero-probability entries of ``p`` contribute nothing."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    if np.any(q <= 0):
        raise ValueError("q must be strictly positive")
    mask = p > 0
    return float(max(np.sum(p[mask] * np.log(p[mask] / q[mask])), 0.0))


def influence_weight(p, q) -> float:
    return 1.0 / (1.0 + kl_divergence(p, q))


@dataclass
class ExposureSummary:
    """Influence weights ``w_ij`` (CSR, row = ego) and the three exposures."""

    weights: sp.csr_matrix
    treatment_exposure: np.ndarray
    contagion_exposure: np.ndarray | None
    feature_exposure: np.ndarray

    @property
    def max_treatment_exposure(self) -> np.ndarray:
        """Exposure each node would get if all its neighbours were treated."""
        return np.asarray(self.weights.sum(axis=1)).ravel()

    def weight(self, i: int, j: int) -> float:
        return float(self.weights[i, j])

    def to_json(self) -> dict:
        w = self.weights.tocoo()
        order = np.lexsort((w.col, w.row))
        wy = self.contagion_exposure
        return {
            "weights": [[int(w.row[k]), int(w.col[k]), float(w.data[k])] for k in order],
            "treatment_exposure": self.treatment_exposure.tolist(),
            "contagion_exposure": None if wy is None else wy.tolist(),
            "feature_exposure": self.feature_exposure.tolist(),
        }


def influence_weights(net: Network, eps: float = DEFAULT_EPS) -> sp.csr_matrix:
    """Sparse ``w_ij = 1 / (1 + D(P_i || P_j))`` for every ordered neighbour pair."""
    m = net.node_count
    rows, cols = net.directed_pairs()
    if not len(rows):
        return sp.csr_matrix((m, m))
    probs = _normalize_rows(net.features, eps)
    logp = np.log(probs)
    p_i = probs[rows]
    kl = np.sum(p_i * (logp[rows] - logp[cols]), axis=1)
    w = 1.0 / (1.0 + np.maximum(kl, 0.0))
    return sp.csr_matrix((w, (rows, cols)), shape=(m, m))


def compute_exposures(net: Network, eps: float = DEFAULT_EPS, need_contagion: bool | None = None,
                      weights: sp.csr_matrix | None = None) -> ExposureSummary:
    """Weighted neighbour sums of treatments, outcomes and features.

    ``need_contagion=True`` makes missing outcomes an error; by default the
    contagion exposure is simply left as ``None`` when outcomes are absent.
    """
    if net.treatments is None:
        raise ValueError("network has no treatments")
    if need_contagion and net.outcomes is None:
        raise ValueError("contagion exposure requested but network has no outcomes")
    w = influence_weights(net, eps) if weights is None else weights
    wt = w @ net.treatments
    wy = None if net.outcomes is None else w @ net.outcomes
    wx = np.asarray(w @ net.features)
    return ExposureSummary(w, np.asarray(wt, dtype=float), wy, wx)
