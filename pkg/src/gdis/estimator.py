"""gDIS: attention GNN + HSIC-regularised outcome head, with mediator and metrics.

The estimators follow the scikit-learn conventions (constructor-only
hyperparameters, ``fit`` returning ``self``, fitted attributes with a trailing
underscore), so ``get_params``/``set_params``/``clone`` work as usual. Inputs
are a :class:`~gdis.graph.Network`, its :class:`~gdis.exposure.ExposureSummary`
and a :class:`~gdis.graph.Partition` rather than a design matrix.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exposure import ExposureSummary
from .graph import Network, Partition
from .nn import (Adam, AttentionGraph, AttentionLayer, Dense, Tensor, center, concat, elu,
                 gather_rows, gaussian_kernel, hsic, mean, mul, scale, square, sub, total)
from .scm import EffectQuery

log = logging.getLogger(__name__)

EFFECTS = ("pde", "pie", "ste", "total_peer")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, last_finite_epoch):
        super().__init__(f"loss became non-finite at epoch {epoch}; "
                         f"last finite epoch was {last_finite_epoch}")
        self.epoch, self.last_finite_epoch = epoch, last_finite_epoch


def _check_inputs(net: Network, exposures: ExposureSummary, need_outcomes: bool = True):
    if net.treatments is None:
        raise ValueError("network has no treatments")
    if need_outcomes and net.outcomes is None:
        raise ValueError("network has no outcomes")
    if need_outcomes and exposures.contagion_exposure is None:
        raise ValueError("exposure summary has no contagion exposure")
    if exposures.treatment_exposure.shape != (net.node_count,):
        raise ValueError("exposures do not match the network size")


class HSICPenalty:
    """HSIC between fixed inputs and a varying embedding, with the input kernel cached."""

    def __init__(self, inputs: np.ndarray):
        m = inputs.shape[0]
        k = gaussian_kernel(inputs).value
        self.centered = center(Tensor(k)).value / (m - 1) ** 2
        # None means the median heuristic on each call; a float pins it (gradient checks)
        self.bandwidth = None

    def __call__(self, embedding) -> Tensor:
        # trace(K_H C K_H' C) / (m-1)^2 == sum((C K_H C) * K_H') / (m-1)^2
        return total(mul(Tensor(self.centered), gaussian_kernel(embedding, self.bandwidth)))


class _Objective:
    """MSE on standardised train outcomes plus lambda * HSIC(features, embeddings)."""

    def __init__(self, model, net, exposures, partition, hsic_nodes):
        self.model = model
        self.features = net.features
        self.graph = AttentionGraph.from_network(net)
        self.inputs = (net.treatments, exposures.treatment_exposure, exposures.contagion_exposure)
        self.train = partition.indices("train")
        self.y_std = (net.outcomes - model.y_mean_) / model.y_scale_
        self.hsic_nodes = hsic_nodes
        self.penalty = None
        if model.hsic_weight and len(hsic_nodes) >= 2:
            std_feats = (net.features[hsic_nodes] - model.feature_mean_) / model.feature_scale_
            self.penalty = HSICPenalty(std_feats)

    def __call__(self):
        """Return (loss, mse term, HSIC value, standardised predictions for all nodes)."""
        m = self.model
        emb = m._embed(self.features, self.graph)
        pred = m._head(emb, *self.inputs)
        resid = sub(gather_rows(pred, self.train), Tensor(self.y_std[self.train][:, None]))
        mse_term = mean(square(resid))
        loss, hsic_value = mse_term, 0.0
        if self.penalty is not None:
            h = self.penalty(gather_rows(emb, self.hsic_nodes))
            hsic_value = float(h.value)
            loss = loss + scale(h, m.hsic_weight)
        return loss, mse_term, hsic_value, pred


class GdisRegressor(RegressorMixin, BaseEstimator):
    """Two attention layers, then a three-layer head on [embedding, T, W_t, W_y].

    The objective is the train-node MSE (on standardised outcomes) plus
    ``hsic_weight`` times HSIC between input features and the second-layer
    embeddings. Validation MSE drives early stopping.
    """

    def __init__(self, hidden: int = 32, hsic_weight: float = 0.1, lr: float = 1e-3,
                 epochs: int = 300, patience: int = 30, negative_slope: float = 0.2,
                 hsic_max_nodes: int | None = 1000, random_state: int = 0):
        self.hidden = hidden
        self.hsic_weight = hsic_weight
        self.lr = lr
        self.epochs = epochs
        self.patience = patience
        self.negative_slope = negative_slope
        self.hsic_max_nodes = hsic_max_nodes
        self.random_state = random_state

    # -- model pieces -------------------------------------------------------
    def _build(self, in_dim: int):
        rng = np.random.default_rng(self.random_state)
        h = self.hidden
        self.gnn_layers_ = [
            AttentionLayer(in_dim, h, rng, self.negative_slope, name="gnn1"),
            AttentionLayer(h, h, rng, self.negative_slope, name="gnn2"),
        ]
        self.head_ = [Dense(h + 3, h, rng, "head1"), Dense(h, h, rng, "head2"),
                      Dense(h, 1, rng, "head3")]

    @property
    def params_(self) -> list:
        out = []
        for layer in self.gnn_layers_ + self.head_:
            out.extend(layer.params)
        return out

    def _embed(self, features, graph) -> Tensor:
        h = Tensor((features - self.feature_mean_) / self.feature_scale_)
        for layer in self.gnn_layers_:
            h = layer(h, graph)
        return h

    def _head(self, emb: Tensor, t, w_t, w_y) -> Tensor:
        cols = np.column_stack([
            np.asarray(t, dtype=float),
            (np.asarray(w_t, dtype=float) - self.input_mean_[0]) / self.input_scale_[0],
            (np.asarray(w_y, dtype=float) - self.input_mean_[1]) / self.input_scale_[1],
        ])
        x = concat([emb, Tensor(cols)], axis=1)
        x = elu(self.head_[0](x))
        x = elu(self.head_[1](x))
        return self.head_[2](x)

    # -- fitting ------------------------------------------------------------
    def _prepare(self, net: Network, exposures: ExposureSummary, partition: Partition):
        """Fit the scalers, initialise parameters and return the training objective."""
        _check_inputs(net, exposures)
        train = partition.indices("train")
        if len(train) < 2:
            raise ValueError("need at least two training nodes")
        feats = net.features
        self.n_features_in_ = feats.shape[1]
        self.feature_mean_ = feats[train].mean(axis=0)
        self.feature_scale_ = _safe_scale(feats[train].std(axis=0))
        wt, wy = exposures.treatment_exposure, exposures.contagion_exposure
        self.input_mean_ = np.array([0.0, wy[train].mean()])
        self.input_scale_ = np.array([_safe_scale(wt[train].std()), _safe_scale(wy[train].std())])
        y = net.outcomes
        self.y_mean_ = float(y[train].mean())
        self.y_scale_ = float(_safe_scale(y[train].std()))
        self._build(self.n_features_in_)
        hsic_nodes = train
        if self.hsic_max_nodes and len(train) > self.hsic_max_nodes:
            rng = np.random.default_rng([self.random_state, 1])
            hsic_nodes = np.sort(rng.choice(train, self.hsic_max_nodes, replace=False))
        return _Objective(self, net, exposures, partition, hsic_nodes)

    def fit(self, net: Network, exposures: ExposureSummary, partition: Partition):
        objective = self._prepare(net, exposures, partition)
        val = partition.indices("val")
        opt = Adam(self.params_, lr=self.lr)
        trace = []
        best = (np.inf, -1, [p.value.copy() for p in self.params_])
        for epoch in range(self.epochs):
            opt.zero_grad()
            try:
                loss, mse_term, hsic_value, pred = objective()
                loss.backward()
                opt.step()
            except FloatingPointError:
                raise TrainingDiverged(epoch, epoch - 1) from None
            y_std = objective.y_std
            val_mse = float(np.mean((pred.value[val, 0] - y_std[val]) ** 2)) if len(val) \
                else float(mse_term.value)
            trace.append({"epoch": epoch, "loss": float(loss.value),
                          "train_mse": float(mse_term.value) * self.y_scale_ ** 2,
                          "hsic": hsic_value, "val_mse": val_mse * self.y_scale_ ** 2})
            if val_mse < best[0] - 1e-12:
                best = (val_mse, epoch, [p.value.copy() for p in self.params_])
            elif epoch - best[1] >= self.patience:
                log.debug("early stop at epoch %d (best %d)", epoch, best[1])
                break
        for p, v in zip(self.params_, best[2]):
            p.value = v
        self.best_epoch_ = best[1]
        self.loss_trace_ = trace
        return self

    # -- inference ----------------------------------------------------------
    def embed(self, net: Network) -> np.ndarray:
        check_is_fitted(self, "head_")
        return self._embed(net.features, AttentionGraph.from_network(net)).value

    def outcome_function(self, net: Network, embedding=None):
        """f(t, w_t, w_y) -> per-unit predicted outcome, embedding held at its factual value."""
        emb = Tensor(self.embed(net) if embedding is None else embedding)

        def f(t, w_t, w_y):
            m = emb.shape[0]
            t, w_t, w_y = (np.broadcast_to(np.asarray(a, dtype=float), (m,)) for a in (t, w_t, w_y))
            return self._head(emb, t, w_t, w_y).value[:, 0] * self.y_scale_ + self.y_mean_

        return f

    def predict(self, net: Network, exposures: ExposureSummary) -> np.ndarray:
        """Factual outcome predictions from observed treatments and exposures."""
        _check_inputs(net, exposures, need_outcomes=False)
        if exposures.contagion_exposure is None:
            raise ValueError("prediction needs the contagion exposure")
        f = self.outcome_function(net)
        return f(net.treatments, exposures.treatment_exposure, exposures.contagion_exposure)

    def hsic_score(self, net: Network, units) -> float:
        """HSIC between input features and embeddings on the given units (no gradient)."""
        feats = (net.features[units] - self.feature_mean_) / self.feature_scale_
        return float(hsic(feats, self.embed(net)[units]).value)

    # -- checkpoints --------------------------------------------------------
    def state_dict(self) -> dict:
        check_is_fitted(self, "head_")
        return {
            "params": {p.name: {"shape": list(p.shape), "values": p.value.ravel().tolist()}
                       for p in self.params_},
            "scalers": {k: np.asarray(getattr(self, k)).tolist() for k in _SCALERS},
            "n_features_in": self.n_features_in_,
            "best_epoch": self.best_epoch_,
        }

    def load_state_dict(self, state: dict):
        self.n_features_in_ = int(state["n_features_in"])
        self._build(self.n_features_in_)
        for k in _SCALERS:
            val = np.asarray(state["scalers"][k], dtype=float)
            setattr(self, k, float(val) if val.ndim == 0 else val)
        for p in self.params_:
            entry = state["params"][p.name]
            p.value = np.array(entry["values"], dtype=float).reshape(entry["shape"])
        self.best_epoch_ = state.get("best_epoch", -1)
        return self


_SCALERS = ("feature_mean_", "feature_scale_", "input_mean_", "input_scale_", "y_mean_",
            "y_scale_")


def _safe_scale(s):
    s = np.asarray(s, dtype=float)
    return np.where(s > 1e-12, s, 1.0) if s.ndim else (float(s) if s > 1e-12 else 1.0)


class LinearMediator(BaseEstimator):
    """Least-squares model of W_y given (W_t, W_x), with a ridge fallback."""

    def __init__(self, ridge: float = 1e-6, rank_tol: float = 1e-10):
        self.ridge = ridge
        self.rank_tol = rank_tol

    @staticmethod
    def design(w_t, w_x) -> np.ndarray:
        w_t = np.asarray(w_t, dtype=float).reshape(-1, 1)
        w_x = np.asarray(w_x, dtype=float).reshape(len(w_t), -1)
        return np.hstack([np.ones((len(w_t), 1)), w_t, w_x])

    def fit(self, w_t, w_x, w_y):
        Z = self.design(w_t, w_x)
        y = np.asarray(w_y, dtype=float)
        sv = np.linalg.svd(Z, compute_uv=False)
        self.ridge_fallback_ = bool(sv[-1] <= self.rank_tol * max(sv[0], 1.0))
        if self.ridge_fallback_:
            log.info("mediator design is rank deficient; using ridge penalty %g", self.ridge)
            pen = self.ridge * np.eye(Z.shape[1])
            pen[0, 0] = 0.0
            coef = np.linalg.solve(Z.T @ Z + pen, Z.T @ y)
        else:
            coef = np.linalg.lstsq(Z, y, rcond=None)[0]
        self.intercept_ = float(coef[0])
        self.coef_ = coef[1:]
        self.n_features_in_ = Z.shape[1] - 1
        return self

    def predict(self, w_t, w_x) -> np.ndarray:
        check_is_fitted(self, "coef_")
        return self.design(w_t, w_x)[:, 1:] @ self.coef_ + self.intercept_

    def score(self, w_t, w_x, w_y) -> float:
        w_y = np.asarray(w_y, dtype=float)
        resid = w_y - self.predict(w_t, w_x)
        ss = np.sum((w_y - w_y.mean()) ** 2)
        return float(1.0 - np.sum(resid ** 2) / ss) if ss > 0 else float(np.sum(resid ** 2) == 0)


def mediator_covariates(exposures: ExposureSummary) -> np.ndarray:
    """W_x plus the total influence mass, i.e. the exposure of a constant feature.

    Exposures are unnormalised sums, so the mass scales both W_t and W_y and
    has to be adjusted for alongside W_x.
    """
    return np.column_stack([exposures.feature_exposure, exposures.max_treatment_exposure])


def fit_mediator(exposures: ExposureSummary, partition: Partition, ridge: float = 1e-6):
    """Fit W_y ~ (W_t, covariates) on training nodes; ``validation_r2_`` is set when val nodes exist."""
    if exposures.contagion_exposure is None:
        raise ValueError("exposure summary has no contagion exposure")
    tr, va = partition.indices("train"), partition.indices("val")
    wt, wy, cov = exposures.treatment_exposure, exposures.contagion_exposure, \
        mediator_covariates(exposures)
    med = LinearMediator(ridge=ridge).fit(wt[tr], cov[tr], wy[tr])
    med.validation_r2_ = med.score(wt[va], cov[va], wy[va]) if len(va) > 1 else float("nan")
    return med


class NoNetworkBaseline(RegressorMixin, BaseEstimator):
    """Linear regression of Y on own features and treatment; blind to the network."""

    def fit(self, net: Network, partition: Partition | None = None):
        idx = np.arange(net.node_count) if partition is None else partition.indices("train")
        Z = np.column_stack([np.ones(len(idx)), net.treatments[idx], net.features[idx]])
        coef = np.linalg.lstsq(Z, net.outcomes[idx], rcond=None)[0]
        self.intercept_, self.treatment_coef_, self.coef_ = float(coef[0]), float(coef[1]), coef[2:]
        return self

    def outcome_function(self, net: Network):
        check_is_fitted(self, "coef_")
        base = net.features @ self.coef_ + self.intercept_

        def f(t, w_t, w_y):
            return base + self.treatment_coef_ * np.asarray(t, dtype=float) + 0.0 * np.asarray(w_t)

        return f

    def predict(self, net: Network, exposures=None) -> np.ndarray:
        return self.outcome_function(net)(net.treatments, 0.0, 0.0)


@dataclass
class EffectEstimates:
    pde: np.ndarray
    pie: np.ndarray
    ste: np.ndarray
    total_peer: np.ndarray
    metrics: dict = field(default_factory=dict)

    def averages(self, units=None) -> dict:
        sel = slice(None) if units is None else units
        return {k: float(np.mean(getattr(self, k)[sel])) for k in EFFECTS}

    def score(self, truth, partition: Partition | None = None, factual=None) -> dict:
        """PEHE per effect on within-sample (train) and out-of-sample (test) units.

        ``factual`` is an optional ``(predicted, observed)`` outcome pair for the
        MSE entries.
        """
        parts = {"all": np.arange(len(self.pde))}
        if partition is not None:
            parts = {"within_sample": partition.indices("train"),
                     "out_of_sample": partition.indices("test")}
        out = {}
        for name, idx in parts.items():
            entry = {f"pehe_{k}": pehe(getattr(self, k)[idx], getattr(truth, k)[idx])
                     for k in EFFECTS}
            entry.update({f"avg_{k}": float(np.mean(getattr(self, k)[idx])) for k in EFFECTS})
            entry.update({f"true_avg_{k}": float(np.mean(getattr(truth, k)[idx])) for k in EFFECTS})
            if factual is not None:
                entry["mse"] = mse(factual[0][idx], factual[1][idx])
            out[name] = entry
        self.metrics = out
        return out


def _resolve_contrast(exposures: ExposureSummary, contrast: EffectQuery | None):
    m = len(exposures.treatment_exposure)
    if contrast is None:
        return np.zeros(m), exposures.max_treatment_exposure
    lo = np.broadcast_to(np.asarray(contrast.w_t, dtype=float), (m,))
    hi = np.broadcast_to(np.asarray(contrast.w_t_prime, dtype=float), (m,))
    return lo, hi


def estimate_effects(model, mediator, net: Network, exposures: ExposureSummary,
                     contrast: EffectQuery | None = None, support=None) -> EffectEstimates:
    """Plug-in PDE/PIE/STE per unit.

    ``model`` is a fitted estimator with ``outcome_function`` or a callable
    ``f(t, w_t, w_y)``; ``mediator`` is a fitted model with
    ``predict(w_t, covariates)`` or such a callable, where the covariates
    come from :func:`mediator_covariates`. ``support`` is the (min, max)
    training range of W_t; contrasts outside it trigger a warning.
    """
    f = model.outcome_function(net) if hasattr(model, "outcome_function") else model
    g = mediator.predict if hasattr(mediator, "predict") else mediator
    lo, hi = _resolve_contrast(exposures, contrast)
    if support is not None:
        outside = (np.minimum(lo, hi) < support[0] - 1e-12) | (np.maximum(lo, hi) > support[1] + 1e-12)
        if np.any(outside):
            warnings.warn(f"{int(outside.sum())} contrast levels fall outside the training "
                          f"support [{support[0]:.4g}, {support[1]:.4g}] of W_t", stacklevel=2)
    t = net.treatments
    wx = mediator_covariates(exposures)
    med_hi, med_lo = g(hi, wx), g(lo, wx)
    top, cross, bottom = f(t, hi, med_hi), f(t, lo, med_hi), f(t, lo, med_lo)
    wt_obs, wy_obs = exposures.treatment_exposure, exposures.contagion_exposure
    if wy_obs is None:
        wy_obs = g(wt_obs, wx)
    ste = f(1.0, wt_obs, wy_obs) - f(0.0, wt_obs, wy_obs)
    pde, pie = top - cross, cross - bottom
    return EffectEstimates(pde, pie, ste, pde + pie)


def pehe(estimated, truth) -> float:
    estimated, truth = np.asarray(estimated, dtype=float), np.asarray(truth, dtype=float)
    if estimated.shape != truth.shape:
        raise ValueError(f"length mismatch: {estimated.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((estimated - truth) ** 2)))


def mse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def train(net: Network, exposures: ExposureSummary, partition: Partition, **hp) -> GdisRegressor:
    return GdisRegressor(**hp).fit(net, exposures, partition)


def flip_rate_experiment(model, net: Network, cfg, rates, partition: Partition, seed: int = 0):
    """Counterfactual outcome MSE as a growing share of treatments is flipped.

    For each rate the treatments are flipped, outcomes are resimulated with
    the same noise, exposures are recomputed from the flipped data and the
    fitted outcome model predicts the new outcomes.
    """
    from .exposure import compute_exposures
    from .simulator import flip_treatments

    emb = model.embed(net)
    f = model.outcome_function(net, embedding=emb)
    weights = compute_exposures(net, cfg.smoothing).weights
    parts = {"within_sample": partition.indices("train"),
             "out_of_sample": partition.indices("test")}
    rows = []
    for rate in rates:
        cf, flipped, _ = flip_treatments(net, rate, seed, cfg)
        exp = compute_exposures(cf, cfg.smoothing, weights=weights)
        pred = f(cf.treatments, exp.treatment_exposure, exp.contagion_exposure)
        for part, idx in parts.items():
            rows.append({"flip_rate": float(rate), "pct_flipped": 100.0 * len(flipped) / net.node_count,
                         "n_flipped": int(len(flipped)), "part": part,
                         "mse": mse(pred[idx], cf.outcomes[idx])})
    return rows
