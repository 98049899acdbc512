from dataclasses import replace
from itertools import combinations

import numpy as np
import pytest

from dre2e.data import SyntheticConfig, generate_synthetic
from dre2e.diffopt import DecisionLayerSpec, LayerKind, solve_layer
from dre2e.loss import TaskLossConfig, task_loss
from dre2e.predict import forward, linear_model, ols_fit
from dre2e.risk import Divergence, ErrorWindow, PhiDivergence
from dre2e.train import (
    DELTA_CAP,
    GAMMA_MIN,
    AdamState,
    TrainConfig,
    adam_step,
    cv_folds,
    decision_rows,
    delta_interval,
    gamma_interval,
    gamma_samples,
    init_delta,
    init_gamma,
    time_series_cv,
    train,
    write_cv_csv,
    write_trace_csv,
)


@pytest.fixture(scope="module")
def tiny():
    ds = generate_synthetic(SyntheticConfig(n=3, m=2, T0=30), 11)
    return ds, ols_fit(ds.X, ds.Y)


@pytest.fixture(scope="module")
def small():
    ds = generate_synthetic(SyntheticConfig(n=4, m=3, T0=60), 3)
    return ds, ols_fit(ds.X, ds.Y)


# ------------------------------------------------------------------- Adam

def test_adam_first_step():
    state = AdamState.zeros_like([np.zeros(1)])
    (p,) = adam_step(state, [np.zeros(1)], [np.ones(1)], 0.1)
    assert p[0] == pytest.approx(-0.1, abs=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_is_a_no_op(rng):
    params = [rng.normal(size=(3, 2)), rng.normal(size=2)]
    state = AdamState.zeros_like(params)
    out = params
    for _ in range(5):
        out = adam_step(state, out, [np.zeros((3, 2)), np.zeros(2)], 0.05)
    assert all(np.array_equal(a, b) for a, b in zip(out, params))


def test_adam_is_deterministic(rng):
    grads = [rng.normal(size=(10, 4)) for _ in range(6)]

    def run():
        s, p = AdamState.zeros_like([np.zeros(4)]), [np.zeros(4)]
        for g in grads:
            p = adam_step(s, p, [g[0]], 0.01)
        return p[0]

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros_like([np.zeros(2)]), [np.zeros(2)], [np.zeros(3)], 0.1)


# ---------------------------------------------------------- initialization

def test_delta_interval_at_two_years():
    lo, hi = delta_interval(104)
    assert 2 * (1 - 1 / np.sqrt(104)) == pytest.approx(PhiDivergence(Divergence.HELLINGER).delta_max(104), abs=1e-12)
    assert (round(lo, 4), round(hi, 4)) == (0.0902, 0.4510)
    assert (round(lo, 2), round(hi, 2)) == (0.09, 0.45)


def test_delta_interval_short_window():
    assert delta_interval(4) == pytest.approx((0.05, 0.25), abs=1e-15)
    d = init_delta(4, seed=5)
    assert 0.05 <= d <= 0.25 and d == init_delta(4, seed=5)
    with pytest.raises(ValueError):
        init_delta(1, seed=0)


def test_gamma_init_within_percentiles(small):
    ds, ols = small
    lo, hi = gamma_interval(ds, ols, 8)
    s = gamma_samples(ds, ols, 8)
    assert lo == pytest.approx(np.sort(s)[0] + 0.01 * (len(s) - 1) * (np.sort(s)[1] - np.sort(s)[0]))
    g = init_gamma(ds, ols, 8, seed=2)
    assert lo <= g <= hi and g == init_gamma(ds, ols, 8, seed=2)


def test_gamma_init_degenerate_predictions(small):
    ds, _ = small
    with pytest.raises(ValueError):
        init_gamma(ds, linear_model(ds.m, ds.n), 8, seed=0)


# -------------------------------------------------------- hand-traced epoch

def simplex_qp(S, c):
    """min z'Sz - c'z over the simplex by active-set enumeration."""
    n = len(c)
    best = None
    for k in range(1, n + 1):
        for sup in combinations(range(n), k):
            sup = list(sup)
            K = np.zeros((k + 1, k + 1))
            K[:k, :k] = 2 * S[np.ix_(sup, sup)]
            K[:k, k] = K[k, :k] = 1.0
            try:
                sol = np.linalg.solve(K, np.r_[c[sup], 1.0])
            except np.linalg.LinAlgError:
                continue
            z = np.zeros(n)
            z[sup] = sol[:k]
            # stationarity: 2Sz - c = nu - mu with mu >= 0 off the support
            mu = 2 * S @ z - c + sol[k]
            if z.min() >= -1e-12 and np.delete(mu, sup).min(initial=0.0) >= -1e-12:
                val = z @ S @ z - c @ z
                if best is None or val < best[0]:
                    best = (val, z)
    return best[1]


def hand_epoch_loss(ds, model, gamma, T, v, w):
    Yhat = np.c_[ds.X, np.ones(len(ds))] @ np.r_[model.params[0], model.params[1][None]]
    E = ds.Y - Yhat
    rows = range(T, len(ds) - v)
    total = 0.0
    for t in rows:
        eps = E[t - T:t]
        S = (eps - eps.mean(0)).T @ (eps - eps.mean(0)) / T
        z = simplex_qp(S, gamma * Yhat[t])
        r = ds.Y[t:t + v + 1] @ z
        sharpe = -r.mean() / r.std(ddof=1)
        total += w * np.mean((Yhat[t] - ds.Y[t]) ** 2) + sharpe
    return total / (len(ds) - T - v)


def test_one_epoch_matches_a_hand_trace(tiny):
    ds, ols = tiny
    T, v, eta = 8, 3, 0.0125
    gamma0 = init_gamma(ds, ols, T, seed=1)
    cfg = TrainConfig(eta=eta, epochs=2, T=T, loss=TaskLossConfig(0.5, v),
                      layer=DecisionLayerSpec(LayerKind.NOMINAL, gamma0),
                      learn_theta=False, learn_gamma=True)
    res = train(ds, ols, cfg, keep=(1,))
    h0 = hand_epoch_loss(ds, ols, gamma0, T, v, 0.5)
    assert abs(res.trace[0].loss - h0) <= 1e-10
    assert res.trace[0].samples == 30 - 8 - 3
    # first Adam step moves gamma by eta against the sign of dL/dgamma
    step = 1e-6
    slope = (hand_epoch_loss(ds, ols, gamma0 + step, T, v, 0.5)
             - hand_epoch_loss(ds, ols, gamma0 - step, T, v, 0.5)) / (2 * step)
    gamma1 = res.checkpoints[1][1]
    assert gamma1 == pytest.approx(max(gamma0 - eta * np.sign(slope), GAMMA_MIN), abs=1e-6)
    assert abs(res.trace[1].loss - hand_epoch_loss(ds, ols, gamma1, T, v, 0.5)) <= 1e-10


# ----------------------------------------------------------------- train

def test_frozen_single_epoch_equals_direct_evaluation(small):
    ds, ols = small
    T, v = 8, 4
    spec = DecisionLayerSpec(LayerKind.DR_HELLINGER, 0.05, 0.2)
    cfg = TrainConfig(epochs=1, T=T, loss=TaskLossConfig(0.5, v), layer=spec,
                      learn_theta=False, learn_gamma=False)
    res = train(ds, ols, cfg)
    Yhat = forward(ols, ds.X)
    rows = decision_rows(len(ds), T, v)
    direct = 0.0
    for t in rows:
        sol = solve_layer(Yhat[t], ErrorWindow(ds.Y[t - T:t] - Yhat[t - T:t]), spec)
        direct += task_loss(sol.z_star, Yhat[t], ds.Y[t:t + v + 1], cfg.loss)[0]
    assert res.trace[0].loss == pytest.approx(direct / len(rows), abs=1e-8)


def test_frozen_loss_is_constant_across_epochs(small):
    ds, ols = small
    cfg = TrainConfig(epochs=3, T=8, loss=TaskLossConfig(0.5, 4),
                      layer=DecisionLayerSpec(LayerKind.NOMINAL, 0.05),
                      learn_theta=False, learn_gamma=False)
    losses = [r.loss for r in train(ds, ols, cfg).trace]
    assert losses[0] == losses[1] == losses[2]


def test_frozen_parameters_are_untouched(small):
    ds, ols = small
    spec = DecisionLayerSpec(LayerKind.DR_HELLINGER, 0.05, 0.2)
    base = TrainConfig(epochs=2, T=8, loss=TaskLossConfig(0.5, 4), layer=spec)
    res = train(ds, ols, replace(base, learn_theta=False, learn_gamma=True, learn_delta=False))
    assert all(np.array_equal(a, b) for a, b in zip(res.model.params, ols.params))
    assert res.delta == 0.2 and res.gamma != 0.05
    res = train(ds, ols, replace(base, learn_theta=True, learn_gamma=False, learn_delta=True))
    assert res.gamma == 0.05 and res.delta != 0.2
    assert not np.array_equal(res.model.params[0], ols.params[0])


def test_base_mse_training_reaches_ols_quality():
    ds = generate_synthetic(SyntheticConfig(n=3, m=2, T0=120, jumps=False), 2)
    T, v = 4, 2
    cfg = TrainConfig(eta=0.01, epochs=600, T=T, loss=TaskLossConfig(1.0, v),
                      layer=DecisionLayerSpec(LayerKind.BASE), learn_gamma=False)
    res = train(ds, linear_model(ds.m, ds.n), cfg)
    rows = list(decision_rows(len(ds), T, v))
    ols = ols_fit(ds.X[rows], ds.Y[rows])

    def mse(model):
        return np.mean((forward(model, ds.X[rows]) - ds.Y[rows]) ** 2)

    assert mse(res.model) <= 1.1 * mse(ols)


def test_projection_keeps_parameters_in_range(small):
    ds, ols = small
    T = 8
    dmax = PhiDivergence(Divergence.HELLINGER).delta_max(T)
    # a huge step drives both parameters into their bounds
    cfg = TrainConfig(eta=10.0, epochs=3, T=T, loss=TaskLossConfig(0.5, 4),
                      layer=DecisionLayerSpec(LayerKind.DR_HELLINGER, 1e-5, 0.99 * dmax),
                      learn_theta=False, learn_gamma=True, learn_delta=True)
    res = train(ds, ols, cfg)
    assert res.gamma >= GAMMA_MIN
    assert 0 < res.delta <= DELTA_CAP * dmax


def test_training_is_deterministic(small):
    ds, ols = small
    cfg = TrainConfig(epochs=2, T=8, loss=TaskLossConfig(0.5, 4),
                      layer=DecisionLayerSpec(LayerKind.DR_VARIATION, 0.05, 0.1), learn_delta=True)
    a, b = train(ds, ols, cfg), train(ds, ols, cfg)
    assert [r.loss for r in a.trace] == [r.loss for r in b.trace]
    assert all(np.array_equal(x, y) for x, y in zip(a.model.params, b.model.params))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learn_delta=True)
    with pytest.raises(ValueError):
        TrainConfig(layer=DecisionLayerSpec(LayerKind.BASE))


def test_dataset_too_short(small):
    ds, ols = small
    with pytest.raises(ValueError):
        train(ds.rows(0, 12), ols, TrainConfig(T=8, loss=TaskLossConfig(0.5, 4)))


def test_index_audit_has_no_lookahead(small):
    ds, ols = small
    T, v = 8, 4
    audit = []
    train(ds, ols, TrainConfig(epochs=1, T=T, loss=TaskLossConfig(0.5, v),
                               layer=DecisionLayerSpec(LayerKind.NOMINAL, 0.05)), audit=audit)
    assert [a.t for a in audit] == list(range(T, len(ds) - v))
    for a in audit:
        assert list(a.error_rows) == list(range(a.t - T, a.t))
        assert a.yhat_row == a.t
        assert max(a.loss_rows) == a.t + v < len(ds)


def test_trace_csv(small, tmp_path):
    ds, ols = small
    res = train(ds, ols, TrainConfig(epochs=2, T=8, loss=TaskLossConfig(0.5, 4)))
    write_trace_csv(res.trace, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,samples,skipped,failed" and len(lines) == 3


# -------------------------------------------------------------------- CV

def test_fold_boundaries():
    assert cv_folds(100) == [(20, 40), (40, 60), (60, 80), (80, 100)]
    assert cv_folds(100, 1) == [(80, 100)]
    with pytest.raises(ValueError):
        cv_folds(100, 3)


def test_single_cell_single_fold(small, tmp_path):
    ds, ols = small
    cfg = TrainConfig(T=8, loss=TaskLossConfig(0.5, 4),
                      layer=DecisionLayerSpec(LayerKind.NOMINAL, 0.05))
    res = time_series_cv(ds, ols, cfg, etas=(0.01,), epochs=(2,), folds=1)
    assert (res.best_eta, res.best_epochs) == (0.01, 2)
    assert len(res.table) == 1 and res.table[0].fold == 1
    again = time_series_cv(ds, ols, cfg, etas=(0.01,), epochs=(2,), folds=1)
    assert res.table == again.table


def test_four_fold_grid(small, tmp_path):
    ds, ols = small
    cfg = TrainConfig(T=4, loss=TaskLossConfig(0.5, 2),
                      layer=DecisionLayerSpec(LayerKind.NOMINAL, 0.05))
    res = time_series_cv(ds, ols, cfg, etas=(0.005, 0.02), epochs=(1, 2), folds=4)
    assert len(res.table) == 4 * 4
    best = min(((e, k) for e in (0.005, 0.02) for k in (1, 2)), key=lambda c: res.mean_loss(*c))
    assert (res.best_eta, res.best_epochs) == best
    # a K-epoch cell equals a standalone K-epoch run from the same start
    fold1 = [r for r in res.table if r.fold == 1 and r.eta == 0.02 and r.epochs == 1]
    alone = time_series_cv(ds, ols, cfg, etas=(0.02,), epochs=(1,), folds=4)
    assert fold1[0].loss == [r for r in alone.table if r.fold == 1][0].loss
    write_cv_csv(res, tmp_path / "cv.csv")
    assert len((tmp_path / "cv.csv").read_text().splitlines()) == 17
