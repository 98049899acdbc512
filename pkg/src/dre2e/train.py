"""End-to-end training of the prediction model and the layer's gamma and delta.

One epoch sweeps every decision row ``t = T, ..., T0-v-1`` (0-based): the
layer sees ``yhat_t`` and the errors of rows ``t-T .. t-1``; the task loss
reads returns ``t .. t+v``. Losses are averaged with weight ``1/(T0-T-v)``
and one Adam step is taken per epoch (full batch).
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import AlignedDataset
from .diffopt import (
    DecisionLayerSpec,
    LayerError,
    LayerKind,
    backward_batch,
    solve_layer_batch,
)
from .loss import TaskLossConfig, ZeroVolatility, task_loss
from .predict import PredictionModel, error_indices, forward, model_backward
from .risk import ErrorWindow, PhiDivergence, Divergence, error_covariance, uniform_pmf

log = logging.getLogger(__name__)

GAMMA_MIN = 1e-6
DELTA_MIN = 1e-6
DELTA_CAP = 0.999  # fraction of delta_max
DEFAULT_ETAS = (0.005, 0.0125, 0.02)
DEFAULT_EPOCHS = (30, 40, 50, 60, 80, 100)


class TrainingError(RuntimeError):
    """Too many layer solves failed within one epoch."""


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.0125
    epochs: int = 30
    T: int = 104
    loss: TaskLossConfig = field(default_factory=TaskLossConfig)
    layer: DecisionLayerSpec = field(default_factory=lambda: DecisionLayerSpec(LayerKind.NOMINAL))
    learn_theta: bool = True
    learn_gamma: bool = True
    learn_delta: bool = False
    seed: int = 0
    max_fail_frac: float = 0.1

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        if self.learn_delta and not self.layer.kind.is_dr:
            raise ValueError(f"delta is not a parameter of the {self.layer.kind.value} layer")
        if self.learn_gamma and self.layer.kind is LayerKind.BASE:
            raise ValueError("gamma is not a parameter of the Base layer")


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(np.asarray(p, float)) for p in params],
                   [np.zeros_like(np.asarray(p, float)) for p in params])


def adam_step(state: AdamState, params, grads, eta: float) -> list:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state disagree in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, float)
        g = np.asarray(g, float)
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError(f"parameter {i}: shape {p.shape} vs gradient {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        out.append(p - eta * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return out


# --------------------------------------------------------- initialization

def gamma_samples(ds: AlignedDataset, model_ols: PredictionModel, T: int) -> np.ndarray:
    """``zhat' Sigma zhat / |yhat_t' zhat|`` for every row with a full window."""
    if len(ds) <= T:
        raise ValueError(f"need more than T={T} rows, got {len(ds)}")
    n = ds.n
    zhat = np.full(n, 1.0 / n)
    Yhat = forward(model_ols, ds.X)
    E = ds.Y - Yhat
    q = uniform_pmf(T)
    out = []
    for t in range(T, len(ds)):
        idx = error_indices(t, T)
        S = error_covariance(ErrorWindow(E[idx.start:idx.stop]), q)
        denom = abs(float(Yhat[t] @ zhat))
        if denom > 0:
            out.append(float(zhat @ S @ zhat) / denom)
    if not out:
        raise ValueError("all predicted equal-weight returns are zero")
    return np.array(out)


def gamma_interval(ds: AlignedDataset, model_ols: PredictionModel, T: int) -> tuple[float, float]:
    """1st and 25th percentiles of :func:`gamma_samples`."""
    lo, hi = np.percentile(gamma_samples(ds, model_ols, T), [1.0, 25.0])
    return float(lo), float(hi)


def init_gamma(ds: AlignedDataset, model_ols: PredictionModel, T: int, seed: int) -> float:
    lo, hi = gamma_interval(ds, model_ols, T)
    return float(np.random.default_rng(seed).uniform(lo, hi)) if hi > lo else lo


def delta_interval(T: int, divergence: PhiDivergence | None = None) -> tuple[float, float]:
    d = divergence or PhiDivergence(Divergence.HELLINGER)
    dmax = d.delta_max(T)
    return 0.05 * dmax, 0.25 * dmax


def init_delta(T: int, seed: int, divergence: PhiDivergence | None = None) -> float:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    lo, hi = delta_interval(T, divergence)
    return float(np.random.default_rng(seed).uniform(lo, hi))


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepResult:
    loss: float
    samples: int
    skipped: int  # degenerate backward, loss kept but gradient dropped
    failed: int  # layer or loss failure, sample dropped
    d_theta: tuple | None = None
    d_gamma: float = 0.0
    d_delta: float = 0.0
    z: np.ndarray | None = None  # decisions, one row per swept t


@dataclass(frozen=True)
class AuditEntry:
    t: int
    error_rows: range
    yhat_row: int
    loss_rows: range


def decision_rows(n_rows: int, T: int, v: int) -> range:
    """Rows ``t`` with a full error window behind and ``v`` returns ahead."""
    return range(T, n_rows - v)


def sweep(ds: AlignedDataset, model: PredictionModel, spec: DecisionLayerSpec, T: int,
          loss_cfg: TaskLossConfig, rows, norm: float, grad: bool = True,
          learn_theta: bool = True, audit: list | None = None) -> SweepResult:
    """Sum of ``norm * task_loss`` over ``rows`` and, if ``grad``, its gradients."""
    v = loss_cfg.v
    rows = list(rows)
    if rows and (rows[0] < T or rows[-1] + v >= len(ds)):
        raise ValueError(f"rows {rows[0]}..{rows[-1]} need T={T} history and v={v} lookahead "
                         f"within {len(ds)} rows")
    Yhat = forward(model, ds.X)
    E = ds.Y - Yhat
    G = np.zeros_like(Yhat) if grad else None
    total, skipped, failed = 0.0, 0, 0
    d_gamma = d_delta = 0.0
    zs = np.full((len(rows), ds.n), np.nan)
    windows = []
    for t in rows:
        idx = error_indices(t, T)
        if audit is not None:
            audit.append(AuditEntry(t, idx, t, range(t, t + v + 1)))
        windows.append(ErrorWindow(E[idx.start:idx.stop]))
    sols = solve_layer_batch(Yhat[rows], windows, spec)
    ok, d_zs, d_mse = [], [], []
    for k, (t, sol) in enumerate(zip(rows, sols)):
        try:
            if isinstance(sol, LayerError):
                raise sol
            val, d_z, d_yhat_mse = task_loss(sol.z_star, Yhat[t], ds.Y[t:t + v + 1], loss_cfg)
        except (LayerError, ZeroVolatility) as exc:
            failed += 1
            log.debug("row %d dropped: %s", t, exc)
            continue
        zs[k] = sol.z_star
        total += norm * val
        ok.append(k)
        d_zs.append(norm * d_z)
        d_mse.append(norm * d_yhat_mse)
    if grad and ok:
        grads = backward_batch([sols[k] for k in ok], np.array(d_zs))
        for k, g, dm in zip(ok, grads, d_mse):
            t = rows[k]
            if g.degenerate:
                skipped += 1
                log.debug("row %d: degenerate layer gradient skipped", t)
                continue
            G[t] += g.d_yhat + dm
            if g.d_eps.size:  # Base carries no error window; eps_j = y_j - yhat_j
                G[t - T:t] -= g.d_eps
            d_gamma += g.d_gamma
            d_delta += g.d_delta
    d_theta = None
    if grad and learn_theta:
        used = np.flatnonzero(np.any(G != 0.0, axis=1))
        d_theta = model_backward(model, ds.X[used], G[used]) if used.size else \
            tuple(np.zeros_like(p) for p in model.params)
    return SweepResult(total, len(rows), skipped, failed, d_theta, d_gamma, d_delta, zs)


# --------------------------------------------------------------- training

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    samples: int
    skipped: int
    failed: int


@dataclass(frozen=True)
class TrainResult:
    model: PredictionModel
    gamma: float
    delta: float
    trace: tuple[EpochRecord, ...]
    # parameters after k updates, for each requested k
    checkpoints: dict = field(default_factory=dict)


def _project(spec: DecisionLayerSpec, T: int, gamma: float, delta: float) -> tuple[float, float]:
    gamma = max(float(gamma), GAMMA_MIN)
    if spec.kind.is_dr:
        cap = DELTA_CAP * spec.divergence.delta_max(T)
        delta = min(max(float(delta), DELTA_MIN), cap)
    return gamma, delta


def train(ds: AlignedDataset, model: PredictionModel, cfg: TrainConfig,
          keep=(), audit: list | None = None) -> TrainResult:
    """Algorithm: K full-batch epochs of Adam on the averaged task loss.

    ``cfg.layer`` supplies the initial gamma and delta. ``keep`` lists epoch
    counts whose parameters are returned in ``checkpoints``.
    """
    T, v = cfg.T, cfg.loss.v
    T0 = len(ds)
    if not T0 > T + v + 1:
        raise ValueError(f"need T0 > T+v+1 = {T + v + 1}, got {T0}")
    rows = decision_rows(T0, T, v)
    norm = 1.0 / (T0 - T - v)
    spec = cfg.layer
    if spec.kind.is_dr:
        spec.check_delta(T)
    gamma, delta = spec.gamma, spec.delta
    theta = list(model.params)

    def learnable():
        out = list(theta) if cfg.learn_theta else []
        if cfg.learn_gamma:
            out.append(np.array(gamma))
        if cfg.learn_delta:
            out.append(np.array(delta))
        return out

    state = AdamState.zeros_like(learnable())
    trace, checkpoints = [], {}
    keep = set(keep)
    any_learnable = cfg.learn_theta or cfg.learn_gamma or cfg.learn_delta
    for epoch in range(1, cfg.epochs + 1):
        current = model.with_params(theta)
        cur_spec = replace(spec, gamma=gamma, delta=delta)
        res = sweep(ds, current, cur_spec, T, cfg.loss, rows, norm, grad=any_learnable,
                    learn_theta=cfg.learn_theta, audit=audit if epoch == 1 else None)
        if res.failed > cfg.max_fail_frac * res.samples:
            raise TrainingError(f"epoch {epoch}: {res.failed} of {res.samples} layer solves failed")
        trace.append(EpochRecord(epoch, res.loss, res.samples, res.skipped, res.failed))
        if res.skipped or res.failed:
            log.info("epoch %d: %d degenerate, %d failed of %d", epoch, res.skipped,
                     res.failed, res.samples)
        if any_learnable:
            grads = list(res.d_theta) if cfg.learn_theta else []
            if cfg.learn_gamma:
                grads.append(np.array(res.d_gamma))
            if cfg.learn_delta:
                grads.append(np.array(res.d_delta))
            new = adam_step(state, learnable(), grads, cfg.eta)
            if cfg.learn_theta:
                theta = new[:len(theta)]
                new = new[len(theta):]
            if cfg.learn_gamma:
                gamma = float(new.pop(0))
            if cfg.learn_delta:
                delta = float(new.pop(0))
            gamma, delta = _project(spec, T, gamma, delta)
        if epoch in keep:
            checkpoints[epoch] = (model.with_params(theta), gamma, delta)
    return TrainResult(model.with_params(theta), gamma, delta, tuple(trace), checkpoints)


def evaluate(ds: AlignedDataset, model: PredictionModel, spec: DecisionLayerSpec, T: int,
             loss_cfg: TaskLossConfig, start: int, stop: int | None = None) -> float:
    """Mean task loss over decision rows in ``[start, stop)`` (history may precede ``start``)."""
    stop = len(ds) if stop is None else stop
    rows = range(max(start, T), stop - loss_cfg.v)
    if len(rows) < 1:
        raise ValueError("evaluation segment is shorter than the loss horizon")
    res = sweep(ds.rows(0, stop), model, spec, T, loss_cfg, rows, 1.0 / len(rows), grad=False)
    if res.failed > 0.1 * res.samples:
        raise TrainingError(f"{res.failed} of {res.samples} validation solves failed")
    return res.loss * len(rows) / max(len(rows) - res.failed, 1)


def write_trace_csv(trace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "samples", "skipped", "failed"])
        for r in trace:
            w.writerow([r.epoch, repr(r.loss), r.samples, r.skipped, r.failed])


# ------------------------------------------------------- cross-validation

@dataclass(frozen=True)
class CVRow:
    eta: float
    epochs: int
    fold: int
    loss: float


@dataclass(frozen=True)
class CVResult:
    best_eta: float
    best_epochs: int
    table: tuple[CVRow, ...]

    def mean_loss(self, eta: float, epochs: int) -> float:
        vals = [r.loss for r in self.table if r.eta == eta and r.epochs == epochs]
        return float(np.mean(vals))


def cv_folds(n_rows: int, folds: int = 4) -> list[tuple[int, int]]:
    """``(train_end, valid_end)`` per fold: 20:20, 40:20, 60:20, 80:20.

    A single fold uses the last split (80:20).
    """
    if folds not in (1, 4):
        raise ValueError(f"folds must be 1 or 4, got {folds}")
    cut = [int(math.floor(n_rows * f / 5 + 0.5)) for f in range(6)]
    pairs = [(cut[k], cut[k + 1]) for k in range(1, 5)]
    return pairs if folds == 4 else pairs[-1:]


def _cv_job(args):
    ds, model, cfg, eta, epochs, fold, train_end, valid_end = args
    res = train(ds.rows(0, train_end), model, replace(cfg, eta=eta, epochs=max(epochs)),
                keep=epochs)
    rows = []
    for K in epochs:
        m_k, g_k, d_k = res.checkpoints[K]
        spec = replace(cfg.layer, gamma=g_k, delta=d_k)
        loss = evaluate(ds, m_k, spec, cfg.T, cfg.loss, train_end, valid_end)
        rows.append(CVRow(eta, K, fold, loss))
    return rows


def time_series_cv(ds: AlignedDataset, model: PredictionModel, cfg: TrainConfig,
                   etas=DEFAULT_ETAS, epochs=DEFAULT_EPOCHS, folds: int = 4,
                   workers: int = 1) -> CVResult:
    """Expanding-window CV over the ``etas x epochs`` grid.

    Every fold starts from ``model`` and ``cfg.layer``'s gamma/delta. One run
    per (eta, fold) trains for ``max(epochs)`` and is scored at every K in the
    grid: with full-batch updates the first K epochs of a longer run are the
    K-epoch run.
    """
    epochs = tuple(sorted(set(int(k) for k in epochs)))
    etas = tuple(float(e) for e in etas)
    if not etas or not epochs:
        raise ValueError("empty hyperparameter grid")
    jobs = [(ds, model, cfg, eta, epochs, f, tr, va)
            for f, (tr, va) in enumerate(cv_folds(len(ds), folds), start=1) for eta in etas]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_cv_job, jobs))
    else:
        parts = [_cv_job(j) for j in jobs]
    table = sorted((r for p in parts for r in p), key=lambda r: (r.eta, r.epochs, r.fold))
    means = {}
    for r in table:
        means.setdefault((r.eta, r.epochs), []).append(r.loss)
    # ties resolve to the first cell in (eta, K) order
    best = min(means, key=lambda k: (float(np.mean(means[k])), k))
    return CVResult(best[0], best[1], tuple(table))


def write_cv_csv(result: CVResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eta", "K", "fold", "loss"])
        for r in result.table:
            w.writerow([repr(r.eta), r.epochs, r.fold, repr(r.loss)])
