import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dre2e.backtest import (
    BacktestConfig,
    System,
    audit_temporal_hygiene,
    initial_state,
    performance_stats,
    run_backtest,
    run_many,
    summary_table,
    wealth_evolution,
    write_report,
)
from dre2e.data import SyntheticConfig, generate_synthetic, split
from dre2e.diffopt import DecisionLayerSpec, solve_layer
from dre2e.loss import TaskLossConfig, ZeroVolatility
from dre2e.predict import forward
from dre2e.risk import ErrorWindow
from dre2e.train import TrainConfig, train


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(SyntheticConfig(n=4, m=3, T0=100), 6)


def quick(system, **kw):
    base = dict(system=system, T=8, v=3, epochs=2, retrain_interval=20, width=8)
    base.update(kw)
    return BacktestConfig(**base)


# ------------------------------------------------------------------ stats

def test_wealth_examples():
    assert wealth_evolution(np.ones((3, 1)), np.zeros((3, 1))) == pytest.approx([1.0, 1.0, 1.0])
    assert wealth_evolution([[1.0], [1.0]], [[0.1], [-0.1]]) == pytest.approx([1.1, 0.99], abs=1e-15)
    with pytest.raises(ValueError):
        wealth_evolution(np.ones((2, 2)), np.ones((3, 2)))


@given(st.integers(0, 10_000))
def test_wealth_log_identity(seed):
    rng = np.random.default_rng(seed)
    Y = rng.normal(0.002, 0.02, size=(60, 3))
    W = rng.dirichlet(np.ones(3), size=60)
    r = np.einsum("ij,ij->i", W, Y)
    assert abs(np.exp(np.log1p(r).sum()) - wealth_evolution(W, Y)[-1]) <= 1e-12


def test_performance_stats_example():
    r = np.array([0.002 + 0.01, 0.002 - 0.01] * 3)
    r = 0.002 + (r - r.mean()) * 0.01 / r.std(ddof=1)
    ret, vol, sr = performance_stats(r)
    assert (ret, vol, sr) == pytest.approx((0.104, 0.0721110255, 1.4422205102), abs=1e-9)


def test_performance_stats_errors(rng):
    with pytest.raises(ZeroVolatility):
        performance_stats(np.full(10, 0.01))
    with pytest.raises(ValueError):
        performance_stats([0.01])
    r = rng.normal(0.001, 0.02, 50)
    assert performance_stats(2 * r)[2] == pytest.approx(performance_stats(r)[2], rel=1e-12)


# --------------------------------------------------------------- backtest

def test_equal_weight(ds):
    rep = run_backtest(ds, quick(System.EW))
    assert np.all(rep.weights == 0.25)
    assert len(rep.returns) == 40 and rep.snapshots == ()
    assert not audit_temporal_hygiene(rep)


def test_po_equals_frozen_nominal(ds):
    po = run_backtest(ds, quick(System.PO))
    nom = run_backtest(ds, quick(System.NOMINAL, learn=(False, False, False)))
    assert np.array_equal(po.weights, nom.weights)
    assert [s.gamma for s in po.snapshots] == [s.gamma for s in nom.snapshots]


def test_one_training_when_interval_covers_the_test(ds):
    cfg = quick(System.DR, retrain_interval=1000)
    rep = run_backtest(ds, cfg)
    assert len(rep.snapshots) == 1
    train_ds, _ = split(ds, cfg.train_frac)
    init = initial_state(train_ds, cfg)
    spec = DecisionLayerSpec(cfg.layer_kind, init.gamma, init.delta)
    res = train(train_ds, init.model, TrainConfig(eta=cfg.eta, epochs=2, T=8, loss=TaskLossConfig(0.5, 3),
                                                  layer=spec, learn_delta=True))
    Yhat = forward(res.model, ds.X)
    final = DecisionLayerSpec(cfg.layer_kind, res.gamma, res.delta)
    for t in (60, 75, 99):
        sol = solve_layer(Yhat[t], ErrorWindow(ds.Y[t - 8:t] - Yhat[t - 8:t]), final)
        assert rep.weights[t - 60] == pytest.approx(sol.z_star, abs=1e-6)


def test_periodic_retraining_resets(ds):
    rep = run_backtest(ds, quick(System.NOMINAL))
    assert [s.row for s in rep.snapshots] == [60, 80]
    # both trainings start from the same initial gamma, so they stay within
    # a couple of Adam steps of it
    g0 = initial_state(split(ds, 0.6)[0], quick(System.NOMINAL)).gamma
    assert all(abs(s.gamma - g0) <= 2 * 0.0125 + 1e-12 for s in rep.snapshots)


@pytest.mark.parametrize("system", list(System))
def test_report_consistency_and_hygiene(ds, system):
    rep = run_backtest(ds, quick(system))
    assert np.allclose(rep.weights.sum(axis=1), 1.0, atol=1e-8)
    assert rep.weights.min() >= -1e-8
    r = np.einsum("ij,ij->i", rep.weights, ds.Y[60:])
    assert np.abs(rep.returns - r).max() <= 1e-12
    assert np.abs(rep.wealth - np.cumprod(1 + r)).max() <= 1e-12
    stats = performance_stats(rep.returns)
    assert np.abs(np.array(stats) - [rep.ann_return, rep.ann_vol, rep.sharpe]).max() <= 1e-12
    assert audit_temporal_hygiene(rep) == []
    assert len(rep.audit) == 40


def test_hygiene_audit_catches_leaks(ds):
    rep = run_backtest(ds, quick(System.EW))
    leaky = rep.audit[:3] + ({"t": 70, "train_rows": [0, 71], "error_rows": [62, 71], "feature_row": 71},)
    bad = audit_temporal_hygiene(type(rep)(**{**rep.__dict__, "audit": leaky}))
    assert len(bad) == 3 and all(b.startswith("t=70") for b in bad)


def test_reports_are_deterministic(ds, tmp_path):
    a = run_backtest(ds, quick(System.NN_DR))
    b = run_backtest(ds, quick(System.NN_DR))
    write_report(a, tmp_path / "a")
    write_report(b, tmp_path / "b")
    for suffix in ("json", "csv"):
        assert (tmp_path / "a" / f"nn_dr.{suffix}").read_bytes() == (tmp_path / "b" / f"nn_dr.{suffix}").read_bytes()
    doc = json.loads((tmp_path / "a" / "nn_dr.json").read_text())
    assert doc["annualization"].startswith("arithmetic")
    assert len(doc["weights"]) == 40 and doc["config"]["system"] == "NN-DR"


def test_parallel_matches_serial(ds):
    cfgs = [quick(System.EW), quick(System.NOMINAL)]
    serial = run_many(ds, cfgs)
    para = run_many(ds, cfgs, workers=2)
    assert all(np.array_equal(a.weights, b.weights) for a, b in zip(serial, para))
    table = summary_table(serial)
    assert "Sharpe ratio" in table and "Values are annualized." in table


def test_config_validation():
    with pytest.raises(ValueError):
        BacktestConfig(system=System.EW, learn=(True, False, False))
    with pytest.raises(ValueError):
        BacktestConfig(system=System.PO, learn=(False, True, False))
    with pytest.raises(ValueError):
        BacktestConfig(system=System.BASE, learn=(True, True, False))
    with pytest.raises(ValueError):
        BacktestConfig(system=System.NOMINAL, learn=(True, True, True))
    with pytest.raises(ValueError):
        BacktestConfig(retrain_interval=0)
    assert BacktestConfig(system="DR", divergence="variation").layer_kind.name == "DR_VARIATION"


def test_short_test_segment(ds):
    with pytest.raises(ValueError):
        run_backtest(ds.rows(0, 25), quick(System.NOMINAL))
