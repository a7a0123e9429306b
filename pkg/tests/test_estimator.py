import json
import warnings

import numpy as np
import pytest
from sklearn.base import clone

from gdis.exposure import compute_exposures
from gdis.graph import partition_graph
from gdis.scm import EffectQuery
from gdis.simulator import SimConfig, StructuralOutcomes, simulate
from gdis.estimator import (EffectEstimates, GdisRegressor, LinearMediator, NoNetworkBaseline,
                            TrainingDiverged, estimate_effects, fit_mediator, flip_rate_experiment,
                            mediator_covariates, mse, pehe)

FAST = dict(hidden=8, epochs=20, patience=100)


# -- mediator ---------------------------------------------------------------

def test_mediator_recovers_exact_linear_relation():
    rng = np.random.default_rng(0)
    wt, wx = rng.random(200), rng.normal(size=(200, 3))
    wy = 0.7 + 1.5 * wt + wx @ np.array([0.2, -1.0, 3.0])
    med = LinearMediator().fit(wt, wx, wy)
    assert not med.ridge_fallback_
    assert abs(med.intercept_ - 0.7) < 1e-6
    assert np.allclose(med.coef_, [1.5, 0.2, -1.0, 3.0], atol=1e-6)
    assert med.score(wt, wx, wy) == pytest.approx(1.0)


def test_mediator_constant_target_fits_intercept_only():
    rng = np.random.default_rng(1)
    wt, wx = rng.random(50), rng.normal(size=(50, 2))
    med = LinearMediator().fit(wt, wx, np.full(50, 3.0))
    assert med.intercept_ == pytest.approx(3.0, abs=1e-9)
    assert np.allclose(med.coef_, 0.0, atol=1e-9)


def test_mediator_duplicate_columns_use_ridge():
    rng = np.random.default_rng(2)
    wt = rng.random(80)
    wx = np.column_stack([wt, rng.normal(size=80)])
    wy = 2.0 * wt + wx[:, 1]
    med = LinearMediator().fit(wt, wx, wy)
    assert med.ridge_fallback_
    assert np.all(np.isfinite(med.coef_))
    assert np.allclose(med.predict(wt, wx), wy, atol=1e-4)


def test_fit_mediator_uses_influence_mass(small_world):
    _, net, exp, part, _ = small_world
    med = fit_mediator(exp, part)
    assert med.coef_.shape == (1 + mediator_covariates(exp).shape[1],)
    assert 0.0 < med.validation_r2_ <= 1.0


# -- metrics ----------------------------------------------------------------

def test_pehe_and_mse_examples():
    y = np.array([1.0, -2.0, 0.5])
    assert pehe(y, y) == 0.0
    assert pehe(y + 0.3, y) == pytest.approx(0.3)
    assert mse([2.0], [0.0]) == 4.0
    with pytest.raises(ValueError, match="length mismatch"):
        pehe([1.0, 2.0], [1.0])
    with pytest.raises(ValueError, match="length mismatch"):
        mse([1.0], [1.0, 2.0])


# -- plug-in effects --------------------------------------------------------

def _truth_mediator(truth):
    def g(levels, wx):
        levels = np.broadcast_to(levels, truth.w_t.shape)
        return np.where(np.isclose(levels, truth.w_t_prime, rtol=0, atol=1e-12),
                        truth.tables["w_y_prime"], truth.tables["w_y"])
    return g


def test_plugin_with_true_functions_reproduces_ground_truth(small_world):
    cfg, net, exp, _, truth = small_world
    f = StructuralOutcomes(net, cfg).unit_outcome
    est = estimate_effects(f, _truth_mediator(truth), net, exp)
    for k in ("pde", "pie", "ste", "total_peer"):
        assert np.max(np.abs(getattr(est, k) - getattr(truth, k))) < 1e-9, k


def test_identical_contrast_gives_zero_peer_effects(small_world):
    _, net, exp, part, _ = small_world
    model = GdisRegressor(**FAST).fit(net, exp, part)
    med = fit_mediator(exp, part)
    est = estimate_effects(model, med, net, exp, EffectQuery(w_t=0.5, w_t_prime=0.5))
    assert np.all(est.pde == 0.0) and np.all(est.pie == 0.0)
    est = estimate_effects(model, med, net, exp)
    assert np.allclose(est.total_peer, est.pde + est.pie, atol=1e-12)


def test_contrast_outside_support_warns(small_world):
    _, net, exp, part, _ = small_world
    f = lambda t, w_t, w_y: np.zeros(net.node_count)
    g = lambda w_t, wx: np.zeros(net.node_count)
    with pytest.warns(UserWarning, match="outside the training support"):
        estimate_effects(f, g, net, exp, EffectQuery(0.0, 50.0), support=(0.0, 10.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        estimate_effects(f, g, net, exp, EffectQuery(0.0, 5.0), support=(0.0, 10.0))


def test_effect_scores_report_both_parts(small_world):
    _, net, exp, part, truth = small_world
    est = EffectEstimates(truth.pde, truth.pie, truth.ste, truth.total_peer)
    out = est.score(truth, part)
    assert set(out) == {"within_sample", "out_of_sample"}
    assert out["out_of_sample"]["pehe_pde"] == 0.0


# -- training ---------------------------------------------------------------

def test_loss_decreases_without_hsic(small_world):
    _, net, exp, part, _ = small_world
    model = GdisRegressor(hsic_weight=0.0, epochs=10, patience=100).fit(net, exp, part)
    losses = [r["loss"] for r in model.loss_trace_]
    assert len(losses) == 10
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic(small_world):
    _, net, exp, part, _ = small_world
    a = GdisRegressor(**FAST, random_state=3).fit(net, exp, part)
    b = GdisRegressor(**FAST, random_state=3).fit(net, exp, part)
    assert a.loss_trace_ == b.loss_trace_
    med = fit_mediator(exp, part)
    ea, eb = estimate_effects(a, med, net, exp), estimate_effects(b, med, net, exp)
    for k in ("pde", "pie", "ste"):
        assert np.array_equal(getattr(ea, k), getattr(eb, k))


def test_noiseless_outcomes_are_realizable():
    cfg = SimConfig(node_count=500, edge_prob=0.02, noise_scale=0.0, seed=4)
    net, _, _ = simulate(cfg)
    exp = compute_exposures(net, cfg.smoothing)
    part = partition_graph(net, seed=4)
    model = GdisRegressor(lr=1e-2, epochs=1000, patience=1000, random_state=4).fit(net, exp, part)
    assert model.loss_trace_[-1]["train_mse"] < 1e-2


def test_hsic_penalty_lowers_held_out_dependence():
    # matched seeds, no early stopping; the effect is small, so compare the mean
    with_pen, without = [], []
    for seed in range(6):
        cfg = SimConfig(node_count=500, edge_prob=0.02, seed=seed)
        net, _, _ = simulate(cfg)
        exp = compute_exposures(net, cfg.smoothing)
        part = partition_graph(net, (0.8, 0.0, 0.2), seed=seed)
        test = part.indices("test")
        for weight, out in ((0.1, with_pen), (0.0, without)):
            model = GdisRegressor(hsic_weight=weight, epochs=200, patience=200,
                                  random_state=seed).fit(net, exp, part)
            out.append(model.hsic_score(net, test))
    assert np.mean(with_pen) < np.mean(without)


def test_divergence_raises(small_world):
    _, net, exp, part, _ = small_world
    with pytest.raises(TrainingDiverged) as err:
        with np.errstate(over="ignore", invalid="ignore"):
            GdisRegressor(lr=1e150, epochs=50, patience=100).fit(net, exp, part)
    assert err.value.last_finite_epoch == err.value.epoch - 1


def test_checkpoint_roundtrip(small_world):
    _, net, exp, part, _ = small_world
    model = GdisRegressor(**FAST).fit(net, exp, part)
    state = json.loads(json.dumps(model.state_dict()))
    loaded = GdisRegressor(**FAST).load_state_dict(state)
    assert np.array_equal(model.predict(net, exp), loaded.predict(net, exp))


def test_sklearn_params_and_clone():
    model = GdisRegressor(hidden=16, hsic_weight=0.0)
    params = model.get_params()
    assert params["hidden"] == 16 and params["hsic_weight"] == 0.0
    copy = clone(model)
    assert copy.get_params() == params and not hasattr(copy, "head_")


def test_baseline_ignores_network(small_world):
    _, net, exp, part, _ = small_world
    base = NoNetworkBaseline().fit(net, part)
    est = estimate_effects(base, fit_mediator(exp, part), net, exp)
    assert np.all(est.pde == 0.0) and np.all(est.pie == 0.0)
    assert np.allclose(est.ste, base.treatment_coef_)


# -- flip experiment --------------------------------------------------------

def test_flip_rows_complete_and_rate_zero_is_factual(small_world):
    cfg, net, exp, part, _ = small_world
    model = GdisRegressor(**FAST).fit(net, exp, part)
    rates = [0.0, 0.5, 1.0]
    rows = flip_rate_experiment(model, net, cfg, rates, part, seed=1)
    assert len(rows) == 2 * len(rates)
    assert {(r["flip_rate"], r["part"]) for r in rows} == \
        {(r, p) for r in rates for p in ("within_sample", "out_of_sample")}
    pred = model.predict(net, exp)
    test = part.indices("test")
    zero = [r for r in rows if r["flip_rate"] == 0.0 and r["part"] == "out_of_sample"][0]
    assert zero["mse"] == pytest.approx(mse(pred[test], net.outcomes[test]), abs=1e-12)
    assert [r["n_flipped"] for r in rows if r["part"] == "out_of_sample"] == [0, 100, 200]
    assert rows == flip_rate_experiment(model, net, cfg, rates, part, seed=1)


def test_full_flip_recomputes_treatment_exposure(small_world):
    from gdis.simulator import flip_treatments

    cfg, net, exp, _, _ = small_world
    flipped, idx, _ = flip_treatments(net, 1.0, 0, cfg)
    new = compute_exposures(flipped, cfg.smoothing, weights=exp.weights)
    assert len(idx) == net.node_count
    assert np.allclose(new.treatment_exposure,
                       exp.max_treatment_exposure - exp.treatment_exposure, atol=1e-12)


# -- recovery at scale ------------------------------------------------------

@pytest.mark.slow
def test_zero_direct_effect_is_recovered():
    cfg = SimConfig(node_count=3000, beta_pde=0.0, seed=0)
    net, _, truth = simulate(cfg)
    exp = compute_exposures(net, cfg.smoothing)
    part = partition_graph(net, seed=0)
    model = GdisRegressor(random_state=0).fit(net, exp, part)
    est = estimate_effects(model, fit_mediator(exp, part), net, exp)
    test = part.indices("test")
    assert abs(truth.pde[test].mean()) < 1e-9
    assert abs(est.pde[test].mean()) < 0.1
