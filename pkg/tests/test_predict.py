import numpy as np
import pytest
from hypothesis import given, strategies as st

from dre2e.data import AlignedDataset
from dre2e.predict import (
    Architecture,
    PredictionModel,
    error_indices,
    forward,
    linear_model,
    load_model,
    mlp_model,
    model_backward,
    ols_fit,
    prediction_errors,
)


def tiny_dataset(Y, X=None):
    Y = np.asarray(Y, dtype=float)
    X = np.zeros((len(Y), 1)) if X is None else np.asarray(X, dtype=float)
    fd = tuple(f"2020-01-{d:02d}" for d in range(1, len(Y) + 1))
    rd = tuple(f"2020-02-{d:02d}" for d in range(1, len(Y) + 1))
    return AlignedDataset(rd, fd, X, Y, tuple(f"f{i}" for i in range(X.shape[1])),
                          tuple(f"a{i}" for i in range(Y.shape[1])))


def hand_mlp(params, x):
    a = x
    layers = list(zip(params[0::2], params[1::2]))
    for i, (W, b) in enumerate(layers):
        h = np.array([sum(a[k] * W[k, j] for k in range(W.shape[0])) + b[j] for j in range(W.shape[1])])
        a = h if i == len(layers) - 1 else np.array([max(v, 0.0) for v in h])
    return a


def test_ols_exact_line():
    model = ols_fit([[1.0], [2.0], [3.0]], [[2.0], [4.0], [6.0]])
    assert model.params[0][0, 0] == pytest.approx(2.0, abs=1e-10)
    assert model.params[1][0] == pytest.approx(0.0, abs=1e-10)


def test_ols_constant_target(rng):
    X = rng.normal(size=(20, 3))
    model = ols_fit(X, np.full((20, 2), 0.7))
    assert np.abs(model.params[0]).max() <= 1e-10
    assert model.params[1] == pytest.approx([0.7, 0.7], abs=1e-10)


@given(st.integers(0, 10_000))
def test_ols_matches_lstsq(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(40, 4)), rng.normal(size=(40, 3))
    model = ols_fit(X, Y)
    ref = np.linalg.lstsq(np.c_[X, np.ones(40)], Y, rcond=None)[0]
    assert np.abs(np.r_[model.params[0], model.params[1][None]] - ref).max() <= 1e-8


def test_ols_needs_enough_rows():
    with pytest.raises(ValueError):
        ols_fit(np.zeros((3, 2)), np.zeros((3, 1)))


def test_ols_singular_design_falls_back_to_ridge():
    X = np.c_[np.arange(10.0), np.arange(10.0)]
    model = ols_fit(X, 2 * X[:, :1])
    assert np.all(np.isfinite(model.params[0]))
    assert forward(model, X) == pytest.approx(2 * X[:, :1], abs=1e-6)


def test_linear_identity():
    model = PredictionModel(Architecture.LINEAR, (np.eye(2), np.zeros(2)))
    assert forward(model, [0.1, 0.2]) == pytest.approx([0.1, 0.2])


def test_zero_mlp_returns_output_bias():
    m = mlp_model(3, 2, hidden_layers=2, width=4)
    params = [np.zeros_like(p) for p in m.params]
    params[-1] = np.array([0.3, -0.1])
    assert forward(m.with_params(params), [1.0, 2.0, 3.0]) == pytest.approx([0.3, -0.1])


@pytest.mark.parametrize("layers", [2, 3])
def test_mlp_matches_hand_evaluation(layers, rng):
    m = mlp_model(5, 4, hidden_layers=layers, width=6, seed=3)
    x = rng.normal(size=5)
    # same arithmetic up to summation order
    assert np.abs(forward(m, x) - hand_mlp(m.params, x)).max() <= 1e-15


@given(st.integers(0, 10_000))
def test_linear_is_affine(seed):
    rng = np.random.default_rng(seed)
    m = ols_fit(rng.normal(size=(10, 3)), rng.normal(size=(10, 2)))
    a, b, t = rng.normal(size=3), rng.normal(size=3), rng.uniform()
    lhs = forward(m, t * a + (1 - t) * b)
    assert lhs == pytest.approx(t * forward(m, a) + (1 - t) * forward(m, b), abs=1e-12)


def test_linear_gradient_is_an_outer_product(rng):
    m = ols_fit(rng.normal(size=(10, 3)), rng.normal(size=(10, 2)))
    x, g = rng.normal(size=3), rng.normal(size=2)
    dW, db = model_backward(m, x, g)
    assert dW == pytest.approx(np.outer(x, g))
    assert db == pytest.approx(g)


def test_dead_relu_passes_no_gradient():
    W1 = np.array([[1.0, -1.0]])
    m = PredictionModel(Architecture.MLP, (W1, np.zeros(2), np.eye(2), np.zeros(2),
                                           np.eye(2), np.zeros(2)))
    grads = model_backward(m, np.array([1.0]), np.array([1.0, 1.0]))
    # the second unit has pre-activation -1 and must not receive gradient
    assert grads[0][0, 1] == 0.0
    assert grads[0][0, 0] == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_mlp_gradient_against_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = mlp_model(4, 3, hidden_layers=3, width=5, seed=seed)
    X, G = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    grads = model_backward(m, X, G)
    h = 1e-6
    for k, p in enumerate(m.params):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            up = [q.copy() for q in m.params]
            dn = [q.copy() for q in m.params]
            up[k][idx] += h
            dn[k][idx] -= h
            num[idx] = (np.sum(G * forward(m.with_params(up), X))
                        - np.sum(G * forward(m.with_params(dn), X))) / (2 * h)
        err = np.linalg.norm(num - grads[k]) / max(np.linalg.norm(num), 1e-3)
        assert err <= 1e-4


def test_error_window_indices():
    Y = np.arange(10.0).reshape(5, 2)
    w = prediction_errors(linear_model(1, 2), tiny_dataset(Y), t=5, T=3)
    assert np.array_equal(w.eps, Y[2:5])
    assert 4 not in error_indices(4, 3) and list(error_indices(4, 3)) == [1, 2, 3]


def test_perfect_model_has_zero_errors(rng):
    X = rng.normal(size=(8, 2))
    Y = X @ np.array([[1.0, 2.0], [0.5, -1.0]]) + 0.1
    model = ols_fit(X, Y)
    w = prediction_errors(model, tiny_dataset(Y, X), t=8, T=4)
    assert np.abs(w.eps).max() <= 1e-12


def test_window_must_fit():
    ds = tiny_dataset(np.zeros((5, 2)))
    with pytest.raises(IndexError):
        prediction_errors(linear_model(1, 2), ds, t=2, T=3)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    from dre2e.predict import save_model
    m = mlp_model(3, 2, hidden_layers=3, width=7, seed=9)
    save_model(m, tmp_path / "m.txt")
    back = load_model(tmp_path / "m.txt")
    assert back.arch is m.arch
    assert all(np.array_equal(a, b) for a, b in zip(m.params, back.params))


def test_bad_architecture_rejected():
    with pytest.raises(ValueError):
        mlp_model(3, 2, hidden_layers=4)
    with pytest.raises(ValueError):
        PredictionModel(Architecture.LINEAR, (np.zeros((2, 3)), np.zeros(2)))
