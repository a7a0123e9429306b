"""Semi-synthetic networked data with known structural equations.

Outcome model, per unit i::

    Y0_i = g(X_i) + b_self * T_i + b_pde * Wt_i + sigma * eps_i
    Wy_i = sum_j w_ij * Y_j
    Y_i  = Y0_i + rho * b_pie * Wy_i

The outcome equations are solved jointly by fixed-point iteration, which
contracts when ``rho * |b_pie|`` times the spectral radius of the weight
matrix is below one. The recorded contagion exposure is therefore exactly the
observable neighbour-outcome exposure. Noise and coefficients come from seed
streams that do not depend on the treatments, so every counterfactual arm
reuses the same noise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import scipy.sparse.linalg as spla

from .exposure import DEFAULT_EPS, compute_exposures, influence_weights
from .graph import Network
from .scm import EffectQuery

PROPENSITY_CLIP = (0.05, 0.95)
TOL = 1e-8
MAX_ITER = 1000

# independent random streams derived from the config seed
_GRAPH, _FEATURES, _TREATMENT, _NOISE, _COEF = range(5)


class ConfigError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass
class SimConfig:
    node_count: int = 3000
    feature_dim: int = 10
    graph_model: str = "erdos_renyi"
    edge_prob: float = 0.003
    attach: int = 3
    propensity_feature_weights: list | None = None
    propensity_neighbor_weights: list | None = None
    propensity_intercept: float = 0.0
    beta_self: float = 2.0
    beta_pde: float = 1.0
    beta_pie: float = 0.5
    outcome_feature_weights: list | None = None
    quadratic: bool = False
    noise_scale: float = 0.5
    contagion_damping: float = 0.25
    smoothing: float = DEFAULT_EPS
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.node_count < 2:
            raise ConfigError("node_count must be at least 2")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.graph_model not in ("erdos_renyi", "barabasi_albert"):
            raise ConfigError(f"unknown graph_model {self.graph_model!r}")
        if self.graph_model == "erdos_renyi" and not 0 <= self.edge_prob <= 1:
            raise ConfigError("edge_prob must lie in [0, 1]")
        if self.graph_model == "barabasi_albert" and not 1 <= self.attach < self.node_count:
            raise ConfigError("attach must lie in [1, node_count)")
        if not 0 <= self.contagion_damping < 1:
            raise ConfigError("contagion_damping must lie in [0, 1)")
        if self.contagion_damping * abs(self.beta_pie) >= 1:
            raise ConfigError("contagion_damping * |beta_pie| must be < 1 for the fixed point to contract")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be nonnegative")
        for name in ("propensity_feature_weights", "propensity_neighbor_weights",
                     "outcome_feature_weights"):
            vec = getattr(self, name)
            if vec is not None and len(vec) != self.feature_dim:
                raise ConfigError(f"{name} must have length feature_dim={self.feature_dim}")

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown simulation config keys: {sorted(unknown)}")
        return cls(**data)

    def resolved(self) -> "SimConfig":
        """Copy with every coefficient vector filled in from the seed."""
        rng = np.random.default_rng([self.seed, _COEF])
        k = self.feature_dim
        drawn = {
            "propensity_feature_weights": rng.normal(0, 1 / np.sqrt(k), k),
            "propensity_neighbor_weights": rng.normal(0, 0.5 / np.sqrt(k), k),
            "outcome_feature_weights": rng.normal(0, 1 / np.sqrt(k), k),
        }
        changes = {name: [float(v) for v in vec] for name, vec in drawn.items()
                   if getattr(self, name) is None}
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.resolved().to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _rng(cfg: SimConfig, stream: int):
    return np.random.default_rng([cfg.seed, stream])


def _graph_edges(cfg: SimConfig) -> np.ndarray:
    seed = int(np.random.default_rng([cfg.seed, _GRAPH]).integers(2**31))
    if cfg.graph_model == "erdos_renyi":
        if cfg.edge_prob >= 1:
            g = nx.complete_graph(cfg.node_count)
        else:
            g = nx.fast_gnp_random_graph(cfg.node_count, cfg.edge_prob, seed=seed)
    else:
        g = nx.barabasi_albert_graph(cfg.node_count, cfg.attach, seed=seed)
    return np.array(sorted(tuple(sorted(e)) for e in g.edges()), dtype=np.int64).reshape(-1, 2)


def propensity(net: Network, cfg: SimConfig, weights=None) -> np.ndarray:
    """Clipped P(T_i = 1 | X_i, W_x_i)."""
    cfg = cfg.resolved()
    w = influence_weights(net, cfg.smoothing) if weights is None else weights
    wx = np.asarray(w @ net.features)
    logit = (net.features @ np.array(cfg.propensity_feature_weights)
             + wx @ np.array(cfg.propensity_neighbor_weights) + cfg.propensity_intercept)
    return np.clip(1.0 / (1.0 + np.exp(-logit)), *PROPENSITY_CLIP)


def generate_network(cfg: SimConfig) -> Network:
    """Graph, standard-normal features and confounded treatments; outcomes pending."""
    cfg = cfg.resolved()
    features = _rng(cfg, _FEATURES).standard_normal((cfg.node_count, cfg.feature_dim))
    net = Network(cfg.node_count, _graph_edges(cfg), features)
    p = propensity(net, cfg)
    treatments = (_rng(cfg, _TREATMENT).random(cfg.node_count) < p).astype(float)
    return net.with_(treatments=treatments)


@dataclass
class OutcomeTrace:
    base: np.ndarray
    outcomes: np.ndarray
    contagion_exposure: np.ndarray
    iterations: int


def spectral_radius(weights) -> float:
    """Perron root of the nonnegative influence-weight matrix."""
    m = weights.shape[0]
    if weights.nnz == 0:
        return 0.0
    if m <= 64:
        return float(np.max(np.abs(np.linalg.eigvals(weights.toarray()))))
    val = spla.eigs(weights.astype(float), k=1, which="LM", return_eigenvectors=False)
    return float(np.abs(val[0]))


class StructuralOutcomes:
    """The outcome equations of one simulated network, vectorised over treatment arms."""

    def __init__(self, net: Network, cfg: SimConfig):
        self.cfg = cfg = cfg.resolved()
        self.net = net
        self.weights = influence_weights(net, cfg.smoothing)
        self.max_exposure = np.asarray(self.weights.sum(axis=1)).ravel()
        self.contagion = cfg.contagion_damping * cfg.beta_pie
        self.radius = spectral_radius(self.weights) if self.contagion else 0.0
        if abs(self.contagion) * self.radius >= 1:
            raise ConfigError(
                f"contagion does not contract: |contagion_damping * beta_pie| = "
                f"{abs(self.contagion):.4g} times spectral radius {self.radius:.4g} >= 1")
        lin = net.features @ np.array(cfg.outcome_feature_weights)
        self.feature_part = lin + (0.5 * lin ** 2 if cfg.quadratic else 0.0)
        self.noise = _rng(cfg, _NOISE).standard_normal(net.node_count)
        self.unit_intercept = self.feature_part + cfg.noise_scale * self.noise

    def unit_outcome(self, t, w_t, w_y, units=None):
        """Y_i as a function of its own treatment and the two exposures."""
        c = self.cfg
        base = self.unit_intercept if units is None else self.unit_intercept[units]
        return base + c.beta_self * np.asarray(t) + c.beta_pde * np.asarray(w_t) \
            + self.contagion * np.asarray(w_y)

    def run(self, treatments) -> OutcomeTrace:
        """Outcomes for one treatment vector (m,) or several arms as columns (m, B)."""
        c = self.cfg
        T = np.asarray(treatments, dtype=float)
        icpt = self.unit_intercept if T.ndim == 1 else self.unit_intercept[:, None]
        w_t = self.weights @ T
        y0 = icpt + c.beta_self * T + c.beta_pde * w_t
        y = y0.copy()
        k = self.contagion
        it = 1
        if k:
            for it in range(1, MAX_ITER + 1):
                nxt = y0 + k * (self.weights @ y)
                change = np.max(np.abs(nxt - y)) if nxt.size else 0.0
                y = nxt
                if change < TOL:
                    break
            else:
                raise ConvergenceError(f"contagion did not converge in {MAX_ITER} iterations")
        w_y = np.asarray(self.weights @ y)
        return OutcomeTrace(y0, y, w_y, it)


def simulate_outcomes(net: Network, cfg: SimConfig):
    """Return the network with outcomes filled in, plus the contagion trace."""
    if net.treatments is None:
        raise ValueError("network has no treatments")
    trace = StructuralOutcomes(net, cfg).run(net.treatments)
    return net.with_(outcomes=trace.outcomes), trace


@dataclass
class GroundTruth:
    pde: np.ndarray
    pie: np.ndarray
    ste: np.ndarray
    total_peer: np.ndarray
    w_t: np.ndarray
    w_t_prime: np.ndarray
    tables: dict = field(default_factory=dict)

    def averages(self, units=None) -> dict:
        sel = slice(None) if units is None else units
        return {k: float(np.mean(getattr(self, k)[sel]))
                for k in ("pde", "pie", "ste", "total_peer")}

    def to_json(self) -> dict:
        return {"averages": self.averages(),
                "per_unit": {k: getattr(self, k).tolist()
                             for k in ("pde", "pie", "ste", "total_peer", "w_t", "w_t_prime")}}


def _contrast_levels(model: StructuralOutcomes, contrast):
    m = model.net.node_count
    top = model.max_exposure
    if contrast is None:
        return np.zeros(m), top.copy()
    levels = []
    for name in ("w_t", "w_t_prime"):
        lv = np.broadcast_to(np.asarray(getattr(contrast, name), dtype=float), (m,)).copy()
        bad = (lv < -1e-12) | (lv > top + 1e-12)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"{name}={lv[i]} unreachable at unit {i}; "
                             f"attainable range is [0, {top[i]:.6g}]")
        levels.append(np.clip(lv, 0.0, top))
    return levels[0], levels[1]


def forced_mediator(model: StructuralOutcomes, levels, block: int = 256) -> np.ndarray:
    """W_y_i when unit i's neighbours all take the common treatment level giving W_t_i = level_i.

    Every unit is a separate intervention on its own neighbourhood; the
    structural equations are rerun network-wide for each, in column blocks.
    """
    net, m = model.net, model.net.node_count
    obs = net.treatments
    nbrs = net.neighbor_lists()
    share = np.divide(levels, model.max_exposure, out=np.zeros(m), where=model.max_exposure > 0)
    out = np.zeros(m)
    for start in range(0, m, block):
        units = np.arange(start, min(start + block, m))
        T = np.repeat(obs[:, None], len(units), axis=1)
        for b, i in enumerate(units):
            T[nbrs[i], b] = share[i]
        trace = model.run(T)
        out[units] = trace.contagion_exposure[units, np.arange(len(units))]
    return out


def ground_truth_effects(net: Network, cfg: SimConfig, contrast: EffectQuery | None = None,
                         block: int = 256) -> GroundTruth:
    """Per-unit PDE, PIE and STE from rerunning the structural equations.

    The default contrast compares all neighbours treated (``w_t_prime``, the
    row sum of influence weights) against all neighbours untreated (0).
    """
    if net.treatments is None:
        raise ValueError("network has no treatments")
    model = StructuralOutcomes(net, cfg)
    w_lo, w_hi = _contrast_levels(model, contrast)
    wy_hi = forced_mediator(model, w_hi, block)
    wy_lo = forced_mediator(model, w_lo, block)
    factual = model.run(net.treatments)
    t = net.treatments
    top = model.unit_outcome(t, w_hi, wy_hi)
    cross = model.unit_outcome(t, w_lo, wy_hi)
    bottom = model.unit_outcome(t, w_lo, wy_lo)
    w_t_obs = model.weights @ t
    treated = model.unit_outcome(1.0, w_t_obs, factual.contagion_exposure)
    control = model.unit_outcome(0.0, w_t_obs, factual.contagion_exposure)
    pde, pie = top - cross, cross - bottom
    return GroundTruth(
        pde=pde, pie=pie, ste=treated - control, total_peer=pde + pie, w_t=w_lo, w_t_prime=w_hi,
        tables={"y_top": top, "y_cross": cross, "y_bottom": bottom, "y_treated": treated,
                "y_control": control, "w_y_prime": wy_hi, "w_y": wy_lo,
                "w_y_factual": factual.contagion_exposure, "w_t_factual": w_t_obs})


def flip_treatments(net: Network, rate: float, seed: int, cfg: SimConfig):
    """Toggle exactly round(rate * m) seeded treatments and resimulate outcomes.

    Returns ``(network, flipped_indices, trace)``; the noise is the same as the
    factual simulation because it is drawn from a treatment-independent stream.
    """
    if not 0 <= rate <= 1:
        raise ValueError(f"flip rate must lie in [0, 1], got {rate}")
    m = net.node_count
    count = int(np.floor(rate * m + 0.5))
    idx = np.sort(np.random.default_rng(seed).choice(m, size=count, replace=False))
    t = net.treatments.copy()
    t[idx] = 1.0 - t[idx]
    flipped, trace = simulate_outcomes(net.with_(treatments=t, outcomes=None), cfg)
    return flipped, idx, trace


def simulate(cfg: SimConfig):
    """Generate, simulate and compute ground truth in one go."""
    net = generate_network(cfg)
    net, trace = simulate_outcomes(net, cfg)
    return net, trace, ground_truth_effects(net, cfg)


def exposures_for(net: Network, cfg: SimConfig):
    return compute_exposures(net, cfg.smoothing)
