import math

import numpy as np
import pytest

from gradcheck import max_relative_error, random_batch, random_eval_network
from oracles import breslow_loglik_parts, newton_cox
from survkit.cox import cox_nll
from survkit.dataset import schema_hash, synthesize_cox
from survkit.errors import DataError, NumericalError, TrainingDivergence
from survkit.model import (
    DEFAULT_CONFIG,
    AdamWR,
    CoxMLP,
    NetworkConfig,
    cox_nll_grad,
    lr_range_test,
    make_batches,
    predict_risk,
    train,
)
from survkit.preprocess import apply_plan, fit_plan

LINEAR = NetworkConfig(hidden_layers=0, dropout=0.0, weight_decay=0.0, batch_size=16,
                       initial_lr=0.01, max_epochs=30)


@pytest.fixture(scope="module")
def small_data():
    ds = synthesize_cox(240, [1.0, -0.5, 0.25], seed=5)
    plan = fit_plan(ds)
    return ds, plan


def test_linear_forward_is_dot_product():
    net = CoxMLP(3, LINEAR)
    beta = np.array([0.3, -1.2, 2.0])
    net.weights[0][:, 0] = beta
    X = np.random.default_rng(0).normal(size=(6, 3))
    np.testing.assert_array_equal(net.forward(X), X @ beta)


def test_zero_weights_give_zero_output():
    net = CoxMLP(4, DEFAULT_CONFIG.replace(dropout=0.0))
    for W in net.weights:
        W[:] = 0
    assert np.all(net.forward(np.ones((5, 4))) == 0)


def test_eval_forward_is_deterministic():
    net = CoxMLP(4, DEFAULT_CONFIG).eval_mode()
    X = np.random.default_rng(1).normal(size=(7, 4))
    np.testing.assert_array_equal(net.forward(X), net.forward(X))


def test_train_mode_dropout_draws_masks():
    net = CoxMLP(4, DEFAULT_CONFIG).train_mode()
    X = np.random.default_rng(1).normal(size=(7, 4))
    assert not np.array_equal(net.forward(X), net.forward(X))
    a = CoxMLP(4, DEFAULT_CONFIG).train_mode().forward(X)
    b = CoxMLP(4, DEFAULT_CONFIG).train_mode().forward(X)
    np.testing.assert_array_equal(a, b)  # same seed, same stream


def test_dimension_mismatch():
    with pytest.raises(DataError):
        CoxMLP(3, LINEAR).forward(np.ones((2, 4)))


def test_non_finite_activation_names_layer():
    net = CoxMLP(2, NetworkConfig(hidden_layers=2, nodes_per_layer=3, dropout=0.0))
    net.weights[1][:] = np.inf
    with pytest.raises(NumericalError, match="hidden layer 1"):
        net.forward(np.ones((2, 2)))


def test_output_has_one_node():
    net = CoxMLP(5, DEFAULT_CONFIG)
    assert net.weights[-1].shape == (75, 1)
    assert len(net.weights) == 4


def test_gradient_matches_finite_differences_eval_mode():
    rng = np.random.default_rng(10)
    for k in range(5):
        net = random_eval_network(5, 2, 10, rng, seed=k)
        assert max_relative_error(net, *random_batch(rng)) < 1e-5


def test_gradient_matches_finite_differences_train_mode_batchnorm():
    rng = np.random.default_rng(11)
    for k in range(5):
        net = random_eval_network(5, 2, 10, rng, seed=k).train_mode()
        assert max_relative_error(net, *random_batch(rng)) < 1e-5


def test_gradient_linear_network():
    rng = np.random.default_rng(12)
    net = random_eval_network(5, 0, 1, rng)
    assert max_relative_error(net, *random_batch(rng)) < 1e-5


def test_shift_direction_has_zero_derivative():
    rng = np.random.default_rng(3)
    net = random_eval_network(5, 2, 10, rng)
    _, grads = cox_nll_grad(net, *random_batch(rng))
    assert abs(grads[("b", 2)][0]) < 1e-12


def test_gradient_vanishes_at_partial_likelihood_optimum():
    ds = synthesize_cox(400, [1.0, -0.5], seed=9)
    X = apply_plan(fit_plan(ds), ds)
    beta, gnorm = newton_cox(X, ds.durations, ds.events)
    assert gnorm < 1e-8
    net = CoxMLP(2, LINEAR).eval_mode()
    net.weights[0][:, 0] = beta
    _, grads = cox_nll_grad(net, X, ds.durations, ds.events)
    assert np.linalg.norm(grads[("W", 0)]) < 1e-7


def test_max_epochs_zero_returns_initial_state(small_data):
    ds, plan = small_data
    cfg = DEFAULT_CONFIG.replace(max_epochs=0, seed=4)
    net, report = train(cfg, ds, ds, plan)
    fresh = CoxMLP(ds.n_features, cfg)
    assert net.digest() == fresh.digest()
    assert report.n_epochs == 0 and report.best_epoch is None


def test_default_config_accepted_on_small_dataset():
    ds = synthesize_cox(32, [1.0, 0.5], seed=0)
    plan = fit_plan(ds)
    net, report = train(DEFAULT_CONFIG.replace(max_epochs=3), ds, ds, plan)
    assert report.n_epochs == 3
    assert np.isfinite(predict_risk(net, plan, ds)).all()


def test_schedule_cycles_double_and_decay(small_data):
    ds, plan = small_data
    cfg = LINEAR.replace(max_epochs=31, early_stop_patience=100)
    _, report = train(cfg, ds, ds, plan)
    assert report.cycle_lengths == [1, 2, 4, 8, 16]
    np.testing.assert_allclose(report.cycle_start_lrs, 0.01 * 0.8 ** np.arange(5), rtol=1e-15)
    # rates restart at each cycle boundary and anneal within a cycle
    starts = np.cumsum([0] + report.cycle_lengths[:-1])
    for s, lr0 in zip(starts, report.cycle_start_lrs):
        assert report.lr[s] == pytest.approx(lr0)
    assert report.lr[4] < report.lr[3]


def test_cosine_shape():
    opt = AdamWR(CoxMLP(2, LINEAR), 1.0, 0.0)
    assert opt.lr_at(3.0) == pytest.approx(0.8**2)  # third cycle starts at epoch 3
    assert opt.lr_at(5.0) == pytest.approx(0.8**2 * 0.5)  # halfway through a 4-epoch cycle
    assert opt.lr_at(6.999) < 1e-5


def test_weight_decay_only_on_weights():
    net = CoxMLP(3, NetworkConfig(hidden_layers=1, nodes_per_layer=4, dropout=0.0))
    for b in net.biases:
        b[:] = 1.0
    before = {k: a.copy() for k, a, _ in net.parameters()}
    opt = AdamWR(net, 0.1, weight_decay=0.5)
    opt.step({k: np.zeros_like(a) for k, a, _ in net.parameters()}, lr=0.1)
    for key, a, decayed in net.parameters():
        if decayed:
            np.testing.assert_allclose(a, before[key] * (1 - 0.05))
        else:
            np.testing.assert_array_equal(a, before[key])


def test_train_is_bit_reproducible(small_data):
    ds, plan = small_data
    cfg = DEFAULT_CONFIG.replace(max_epochs=4, nodes_per_layer=16, seed=7)
    a, ra = train(cfg, ds, ds, plan)
    b, rb = train(cfg, ds, ds, plan)
    assert a.digest() == b.digest()
    assert ra.val_loss == rb.val_loss


def test_early_stopping_returns_best_state(small_data):
    ds, plan = small_data
    fit, val = ds.subset(np.arange(160)), ds.subset(np.arange(160, 240))
    cfg = DEFAULT_CONFIG.replace(nodes_per_layer=32, max_epochs=200, early_stop_patience=3,
                                 initial_lr=0.01)
    net, report = train(cfg, fit, val, plan)
    assert report.stopped_early
    assert report.best_val_loss == min(report.val_loss)
    assert report.n_epochs == report.best_epoch + 1 + 3
    Xv = apply_plan(plan, val)
    assert cox_nll(net.forward(Xv), val.durations, val.events) == pytest.approx(report.best_val_loss)


def test_divergence_reports_epoch(small_data):
    ds, plan = small_data
    cfg = DEFAULT_CONFIG.replace(initial_lr=1e300, max_epochs=5, nodes_per_layer=8)
    with pytest.raises(TrainingDivergence) as info:
        train(cfg, ds, ds, plan)
    assert info.value.epoch == 0


def test_training_needs_events(small_data):
    ds, plan = small_data
    censored = ds.subset(np.flatnonzero(~ds.events))
    with pytest.raises(DataError):
        train(LINEAR, censored, ds, plan)


def test_batches_always_contain_events():
    rng = np.random.default_rng(0)
    events = np.zeros(50, dtype=bool)
    events[[3, 40]] = True
    for _ in range(20):
        batches = make_batches(events, 4, rng)
        assert all(events[b].any() for b in batches)
        assert all(len(b) >= 2 for b in batches)
        assert sorted(np.concatenate(batches).tolist()) == list(range(50))


def test_predict_risk_properties(small_data):
    ds, plan = small_data
    net, _ = train(DEFAULT_CONFIG.replace(max_epochs=2, nodes_per_layer=16), ds, ds, plan)
    twins = ds.subset([0, 0 + 1]).with_features(np.repeat(ds.X[:1], 2, axis=0))
    r = predict_risk(net, plan, twins)
    assert r[0] == r[1]
    full = predict_risk(net, plan, ds)
    rng = np.random.default_rng(0)
    for _ in range(5):
        perm = rng.permutation(len(ds))
        np.testing.assert_array_equal(predict_risk(net, plan, ds.subset(perm)), full[perm])
    assert not net.training


def test_linear_state_predicts_standardized_dot_product(small_data):
    ds, plan = small_data
    net = CoxMLP(3, LINEAR, feature_names=plan.names)
    beta = np.array([0.5, -1.0, 2.0])
    net.weights[0][:, 0] = beta
    np.testing.assert_allclose(predict_risk(net, plan, ds), apply_plan(plan, ds) @ beta)


def test_serialization_round_trip(small_data):
    ds, plan = small_data
    net, _ = train(DEFAULT_CONFIG.replace(max_epochs=2, nodes_per_layer=8), ds, ds, plan)
    h = schema_hash(ds.schema)
    back = CoxMLP.from_json(net.to_json(h), expected_schema_hash=h)
    assert back.digest() == net.digest()
    np.testing.assert_array_equal(predict_risk(back, plan, ds), predict_risk(net, plan, ds))
    with pytest.raises(DataError, match="different feature schema"):
        CoxMLP.from_json(net.to_json(h), expected_schema_hash="0" * 64)


def test_lr_range_test_records_losses(small_data):
    ds, plan = small_data
    lrs, losses = lr_range_test(DEFAULT_CONFIG.replace(nodes_per_layer=8), ds, plan, n_steps=20)
    assert lrs.shape == losses.shape == (20,)
    assert np.all(np.diff(lrs) > 0)
    assert np.isfinite(losses[:10]).all()


def test_linear_training_recovers_newton_estimate():
    ds = synthesize_cox(1000, [1.0, -0.5, 0.25], baseline_rate=0.1, censor_rate=0.04, seed=3)
    plan = fit_plan(ds)
    X = apply_plan(plan, ds)
    ref, gnorm = newton_cox(X, ds.durations, ds.events)
    assert gnorm < 1e-8
    cfg = LINEAR.replace(batch_size=len(ds), initial_lr=0.05, max_epochs=1023,
                         early_stop_patience=1023)
    net, _ = train(cfg, ds, ds, plan)
    np.testing.assert_allclose(net.weights[0][:, 0], ref, atol=0.05)
    # the reference really is the optimum of the same objective
    assert breslow_loglik_parts(ref, X, ds.durations, ds.events)[0] <= cox_nll(
        predict_risk(net, plan, ds), ds.durations, ds.events) + 1e-9
    assert math.isfinite(gnorm)
