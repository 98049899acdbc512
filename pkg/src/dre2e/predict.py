"""Prediction layer: linear model with intercept or a small ReLU MLP.

Parameters are a flat list ``[W0, b0, W1, b1, ...]`` with ``W_k`` of shape
``(fan_in, fan_out)``, so a batch of rows ``X`` maps as ``X @ W + b``.
Gradients use the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data import AlignedDataset
from .risk import ErrorWindow

OLS_RIDGE = 1e-8
# the normal matrix counts as singular past this condition number
OLS_MAX_COND = 1e12


class Architecture(str, Enum):
    LINEAR = "Linear"
    MLP = "Mlp"


@dataclass(frozen=True)
class PredictionModel:
    arch: Architecture
    params: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "arch", Architecture(self.arch))
        ps = tuple(np.array(p, dtype=float) for p in self.params)
        object.__setattr__(self, "params", ps)
        if len(ps) < 2 or len(ps) % 2:
            raise ValueError("params must alternate weight, bias")
        for k in range(0, len(ps), 2):
            W, b = ps[k], ps[k + 1]
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {k // 2}: weight {W.shape} and bias {b.shape} disagree")
            if k and W.shape[0] != ps[k - 2].shape[1]:
                raise ValueError(f"layer {k // 2}: input width {W.shape[0]} != "
                                 f"previous output {ps[k - 2].shape[1]}")
        if self.arch is Architecture.LINEAR and len(ps) != 2:
            raise ValueError("a Linear model has exactly one layer")
        if self.arch is Architecture.MLP and len(ps) not in (6, 8):
            raise ValueError("an Mlp has 2 or 3 hidden layers")
        if not all(np.all(np.isfinite(p)) for p in ps):
            raise ValueError("non-finite parameters")

    @property
    def m(self) -> int:
        return self.params[0].shape[0]

    @property
    def n(self) -> int:
        return self.params[-1].shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.m,) + tuple(self.params[k].shape[1] for k in range(0, len(self.params), 2))

    def with_params(self, params) -> "PredictionModel":
        return PredictionModel(self.arch, tuple(params))


def linear_model(m: int, n: int) -> PredictionModel:
    return PredictionModel(Architecture.LINEAR, (np.zeros((m, n)), np.zeros(n)))


def mlp_model(m: int, n: int, hidden_layers: int = 3, width: int = 32, seed: int = 0) -> PredictionModel:
    """Weights and biases drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    if hidden_layers not in (2, 3):
        raise ValueError(f"hidden_layers must be 2 or 3, got {hidden_layers}")
    if width < 1:
        raise ValueError("width must be positive")
    rng = np.random.default_rng(seed)
    dims = [m] + [width] * hidden_layers + [n]
    params = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(rng.uniform(-bound, bound, size=fan_out))
    return PredictionModel(Architecture.MLP, tuple(params))


def ols_fit(X, Y) -> PredictionModel:
    """Least squares with intercept via the normal equations."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"X {X.shape} and Y {Y.shape} must be 2-d with equal rows")
    T0, m = X.shape
    if T0 <= m + 1:
        raise ValueError(f"OLS needs more than m+1={m + 1} rows, got {T0}")
    Xa = np.hstack([X, np.ones((T0, 1))])
    M = Xa.T @ Xa
    if not np.linalg.cond(M) <= OLS_MAX_COND:
        M = M + OLS_RIDGE * np.eye(m + 1)
    theta = np.linalg.solve(M, Xa.T @ Y)
    return PredictionModel(Architecture.LINEAR, (theta[:m], theta[m]))


def _layers(model: PredictionModel):
    ps = model.params
    return [(ps[k], ps[k + 1]) for k in range(0, len(ps), 2)]


def _forward_trace(model: PredictionModel, X: np.ndarray):
    """Layer inputs and pre-activations needed by backprop."""
    inputs, pre = [], []
    a = X
    layers = _layers(model)
    for i, (W, b) in enumerate(layers):
        inputs.append(a)
        h = a @ W + b
        pre.append(h)
        a = h if i == len(layers) - 1 else np.maximum(h, 0.0)
    return a, inputs, pre


def forward(model: PredictionModel, x) -> np.ndarray:
    """``yhat`` for one feature vector (m,) or a batch of rows (B, m)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.m or x.ndim not in (1, 2):
        raise ValueError(f"features have shape {x.shape}, model expects (..., {model.m})")
    return _forward_trace(model, x)[0]


def model_backward(model: PredictionModel, x, dL_dyhat) -> tuple[np.ndarray, ...]:
    """Gradient of ``sum_rows dL_dyhat . yhat`` w.r.t. every parameter.

    Accepts one row or a batch; batch gradients are summed over rows. The
    ReLU derivative at exactly zero is taken as 0.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(dL_dyhat, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    G = g[None, :] if g.ndim == 1 else g
    if X.shape[1] != model.m or G.shape != (X.shape[0], model.n):
        raise ValueError(f"shapes x {x.shape} and dL_dyhat {g.shape} do not match the model")
    _, inputs, pre = _forward_trace(model, X)
    layers = _layers(model)
    grads = [None] * len(model.params)
    delta = G
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[2 * i] = inputs[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = (delta @ W.T) * (pre[i - 1] > 0.0)
    return tuple(grads)


def error_indices(t: int, T: int) -> range:
    """Rows whose errors feed the decision at ``t``: ``t-T, ..., t-1``."""
    idx = range(t - T, t)
    assert t not in idx
    return idx


def prediction_errors(model: PredictionModel, ds: AlignedDataset, t: int, T: int) -> ErrorWindow:
    """The ``T`` most recent errors ``y_j - g(x_j)`` before row ``t``, oldest first."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if t - T < 0 or t > len(ds):
        raise IndexError(f"window [{t - T}, {t}) exceeds the {len(ds)} data rows")
    idx = error_indices(t, T)
    rows = slice(idx.start, idx.stop)
    return ErrorWindow(ds.Y[rows] - forward(model, ds.X[rows]))


# -------------------------------------------------------------- checkpoint

def save_model(model: PredictionModel, path) -> None:
    """Plain text: a header, then each array as ``name rows cols`` and its rows.

    Numbers carry 17 significant digits so a reload is bit-identical.
    """
    lines = ["dre2e-model 1", f"arch {model.arch.value}",
             "dims " + " ".join(str(d) for d in model.dims)]
    for k, p in enumerate(model.params):
        a = p.reshape(p.shape[0], -1) if p.ndim == 2 else p.reshape(1, -1)
        kind = "W" if p.ndim == 2 else "b"
        lines.append(f"{kind}{k // 2} {a.shape[0]} {a.shape[1]}")
        lines.extend(" ".join(f"{v:.17g}" for v in row) for row in a)
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> PredictionModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "dre2e-model 1":
        raise ValueError(f"{path}: not a model checkpoint")
    arch = Architecture(lines[1].split()[1])
    dims = [int(d) for d in lines[2].split()[1:]]
    params, pos = [], 3
    for k in range(2 * (len(dims) - 1)):
        name, r, c = lines[pos].split()
        r, c = int(r), int(c)
        rows = [[float(v) for v in lines[pos + 1 + i].split()] for i in range(r)]
        a = np.array(rows, dtype=float).reshape(r, c)
        expect_w = k % 2 == 0
        if name[0] != ("W" if expect_w else "b"):
            raise ValueError(f"{path}: unexpected block {name}")
        params.append(a if expect_w else a.ravel())
        pos += 1 + r
    model = PredictionModel(arch, tuple(params))
    if list(model.dims) != dims:
        raise ValueError(f"{path}: dims header does not match the arrays")
    return model
