"""Walk-forward evaluation of the investment systems.

The data are split chronologically; the test segment is walked week by
week. At every retrain boundary ``b`` (every ``retrain_interval`` test
rows) the system is reset to its initial parameters and trained on rows
``< b``. Between boundaries each decision ``z_t`` uses ``x_t``, the errors
of rows ``t-T .. t-1`` and the parameters trained on rows ``< b <= t``.

Annualization convention (arithmetic): return ``52 * mean``, volatility
``sqrt(52) * std`` (sample, ddof=1), Sharpe ``return / volatility``.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .data import AlignedDataset, split
from .diffopt import DecisionLayerSpec, LayerKind, solve_layer_batch
from .loss import TaskLossConfig, ZeroVolatility, VOL_FLOOR
from .predict import (
    PredictionModel,
    error_indices,
    forward,
    mlp_model,
    ols_fit,
)
from .risk import Divergence, ErrorWindow, PhiDivergence
from .train import (
    DEFAULT_EPOCHS,
    DEFAULT_ETAS,
    TrainConfig,
    init_delta,
    init_gamma,
    time_series_cv,
    train,
)

ANNUALIZATION = "arithmetic: return = 52*mean, volatility = sqrt(52)*std (ddof=1), sharpe = return/volatility"
WEEKS = 52


class System(str, Enum):
    EW = "EW"
    PO = "PO"
    BASE = "Base"
    NOMINAL = "Nominal"
    DR = "DR"
    NN_NOMINAL = "NN-Nominal"
    NN_DR = "NN-DR"

    @property
    def layer(self) -> LayerKind | None:
        return {System.EW: None, System.PO: LayerKind.NOMINAL, System.BASE: LayerKind.BASE,
                System.NOMINAL: LayerKind.NOMINAL, System.NN_NOMINAL: LayerKind.NOMINAL,
                System.DR: LayerKind.DR_HELLINGER, System.NN_DR: LayerKind.DR_HELLINGER}[self]

    @property
    def neural(self) -> bool:
        return self in (System.NN_NOMINAL, System.NN_DR)


_DEFAULT_FLAGS = {
    System.EW: (False, False, False),
    System.PO: (False, False, False),
    System.BASE: (True, False, False),
    System.NOMINAL: (True, True, False),
    System.DR: (True, True, True),
    System.NN_NOMINAL: (True, True, False),
    System.NN_DR: (True, True, True),
}


@dataclass(frozen=True)
class BacktestConfig:
    """One investment system and its training protocol.

    ``learn`` is ``(theta, gamma, delta)``; None takes the system default.
    ``gamma0``/``delta0`` of None are drawn from the data-driven intervals.
    ``cv_folds`` of 0 uses the fixed ``eta``/``epochs``; otherwise the grid
    is cross-validated on the training segment (1 or 4 folds).
    """

    system: System = System.NOMINAL
    divergence: Divergence = Divergence.HELLINGER
    learn: tuple[bool, bool, bool] | None = None
    retrain_interval: int = 104
    train_frac: float = 0.6
    T: int = 104
    v: int = 12
    mse_weight: float = 0.5
    eta: float = 0.0125
    epochs: int = 30
    cv_folds: int = 0
    cv_etas: tuple[float, ...] = DEFAULT_ETAS
    cv_epochs: tuple[int, ...] = DEFAULT_EPOCHS
    hidden_layers: int = 3
    width: int = 32
    gamma0: float | None = None
    delta0: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "system", System(self.system))
        object.__setattr__(self, "divergence", Divergence(self.divergence))
        if self.learn is None:
            object.__setattr__(self, "learn", _DEFAULT_FLAGS[self.system])
        learn = tuple(bool(f) for f in self.learn)
        object.__setattr__(self, "learn", learn)
        if len(learn) != 3:
            raise ValueError("learn must be (theta, gamma, delta)")
        kind = self.system.layer
        if kind is None and any(learn):
            raise ValueError("EW has nothing to learn")
        if self.system is System.PO and any(learn):
            raise ValueError("PO keeps OLS weights and a fixed gamma")
        if kind is LayerKind.BASE and (learn[1] or learn[2]):
            raise ValueError("Base has no gamma or delta")
        if kind is LayerKind.NOMINAL and learn[2]:
            raise ValueError(f"{self.system.value} has no delta")
        if self.retrain_interval < 1:
            raise ValueError("retrain_interval must be >= 1")
        if not self.eta > 0 or self.epochs < 1 or self.T < 2:
            raise ValueError("need eta > 0, epochs >= 1 and T >= 2")
        if not 0 < self.train_frac < 1:
            raise ValueError("train_frac must lie in (0, 1)")
        if self.cv_folds not in (0, 1, 4):
            raise ValueError("cv_folds must be 0, 1 or 4")
        object.__setattr__(self, "cv_etas", tuple(float(e) for e in self.cv_etas))
        object.__setattr__(self, "cv_epochs", tuple(int(k) for k in self.cv_epochs))
        TaskLossConfig(self.mse_weight, self.v)

    @property
    def layer_kind(self) -> LayerKind | None:
        kind = self.system.layer
        if kind is LayerKind.DR_HELLINGER and self.divergence is Divergence.VARIATION:
            return LayerKind.DR_VARIATION
        return kind


@dataclass(frozen=True)
class Snapshot:
    row: int
    date: str
    gamma: float
    delta: float
    eta: float
    epochs: int


@dataclass(frozen=True)
class BacktestReport:
    system: str
    asset_names: tuple[str, ...]
    dates: tuple[str, ...]
    weights: np.ndarray  # weeks x n
    returns: np.ndarray  # realized portfolio returns
    wealth: np.ndarray
    ann_return: float
    ann_vol: float
    sharpe: float
    snapshots: tuple[Snapshot, ...]
    audit: tuple[dict, ...] = ()
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "system": self.system,
            "annualization": ANNUALIZATION,
            "config": self.config,
            "stats": {"ann_return": self.ann_return, "ann_vol": self.ann_vol, "sharpe": self.sharpe},
            "asset_names": list(self.asset_names),
            "dates": list(self.dates),
            "weights": self.weights.tolist(),
            "returns": self.returns.tolist(),
            "wealth": self.wealth.tolist(),
            "snapshots": [asdict(s) for s in self.snapshots],
            "audit": list(self.audit),
        }


# ------------------------------------------------------------------ stats

def wealth_evolution(weights, asset_returns) -> np.ndarray:
    """Compounded wealth after each week, starting from 1.0."""
    W = np.asarray(weights, dtype=float)
    Y = np.asarray(asset_returns, dtype=float)
    if W.shape != Y.shape:
        raise ValueError(f"weights {W.shape} and returns {Y.shape} are not aligned")
    r = np.einsum("ij,ij->i", W, Y) if W.ndim == 2 else W * Y
    return np.cumprod(1.0 + r)


def performance_stats(returns) -> tuple[float, float, float]:
    r = np.asarray(returns, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need at least 2 returns")
    mu = float(r.mean())
    sd = float(r.std(ddof=1))
    if not sd > VOL_FLOOR * max(float(np.abs(r).max()), VOL_FLOOR):
        raise ZeroVolatility("constant returns have no volatility")
    ann_r = WEEKS * mu
    ann_v = math.sqrt(WEEKS) * sd
    return ann_r, ann_v, ann_r / ann_v


# -------------------------------------------------------------- backtest

@dataclass(frozen=True)
class InitialState:
    model: PredictionModel | None
    gamma: float
    delta: float


def initial_state(train_ds: AlignedDataset, cfg: BacktestConfig) -> InitialState:
    """Initial model, gamma and delta, drawn from independent streams of ``cfg.seed``."""
    s_model, s_gamma, s_delta = (int(s.generate_state(1)[0])
                                 for s in np.random.SeedSequence(cfg.seed).spawn(3))
    kind = cfg.layer_kind
    if kind is None:
        return InitialState(None, 0.0, 0.0)
    ols = ols_fit(train_ds.X, train_ds.Y)
    model = mlp_model(train_ds.m, train_ds.n, cfg.hidden_layers, cfg.width, s_model) \
        if cfg.system.neural else ols
    gamma = 0.0
    if kind is not LayerKind.BASE:
        gamma = cfg.gamma0 if cfg.gamma0 is not None else init_gamma(train_ds, ols, cfg.T, s_gamma)
    delta = 0.0
    if kind.is_dr:
        div = PhiDivergence(cfg.divergence)
        delta = cfg.delta0 if cfg.delta0 is not None else init_delta(cfg.T, s_delta, div)
    return InitialState(model, float(gamma), float(delta))


def _train_cfg(cfg: BacktestConfig, init: InitialState, eta: float, epochs: int) -> TrainConfig:
    spec = DecisionLayerSpec(cfg.layer_kind, init.gamma, init.delta)
    th, ga, de = cfg.learn
    return TrainConfig(eta=eta, epochs=epochs, T=cfg.T, loss=TaskLossConfig(cfg.mse_weight, cfg.v),
                       layer=spec, learn_theta=th, learn_gamma=ga, learn_delta=de, seed=cfg.seed)


def run_backtest(ds: AlignedDataset, cfg: BacktestConfig) -> BacktestReport:
    train_ds, test_ds = split(ds, cfg.train_frac)
    start, N = len(train_ds), len(ds)
    if len(test_ds) <= cfg.T + cfg.v and cfg.layer_kind is not None:
        raise ValueError(f"test segment of {len(test_ds)} rows is not longer than T+v")
    n = ds.n
    kind = cfg.layer_kind
    init = initial_state(train_ds, cfg)
    learns = any(cfg.learn)
    eta, epochs = cfg.eta, cfg.epochs
    if learns and cfg.cv_folds:
        cv = time_series_cv(train_ds, init.model, _train_cfg(cfg, init, eta, epochs),
                            cfg.cv_etas, cfg.cv_epochs, folds=cfg.cv_folds)
        eta, epochs = cv.best_eta, cv.best_epochs

    weights = np.zeros((N - start, n))
    audit, snapshots = [], []
    model, gamma, delta = init.model, init.gamma, init.delta
    for b in range(start, N, cfg.retrain_interval):
        stop = min(b + cfg.retrain_interval, N)
        if kind is not None:
            if learns:
                try:
                    res = train(ds.rows(0, b), init.model, _train_cfg(cfg, init, eta, epochs))
                except Exception as exc:
                    raise RuntimeError(f"{cfg.system.value}: training for {ds.dates[b]} "
                                       f"(row {b}) failed: {exc}") from exc
                model, gamma, delta = res.model, res.gamma, res.delta
            snapshots.append(Snapshot(b, ds.dates[b], gamma, delta, eta, epochs if learns else 0))
            spec = DecisionLayerSpec(kind, gamma, delta)
            Yhat = forward(model, ds.X[b - cfg.T:stop])
            E = ds.Y[b - cfg.T:stop] - Yhat
        if kind is None:
            weights[b - start:stop - start] = 1.0 / n
            audit.extend({"t": t, "train_rows": [0, 0], "error_rows": [t, t], "feature_row": t}
                         for t in range(b, stop))
            continue
        off = b - cfg.T
        idxs = [error_indices(t, cfg.T) for t in range(b, stop)]
        windows = [ErrorWindow(E[i.start - off:i.stop - off]) for i in idxs]
        sols = solve_layer_batch(Yhat[b - off:stop - off], windows, spec)
        for t, idx, sol in zip(range(b, stop), idxs, sols):
            if isinstance(sol, Exception):
                raise RuntimeError(f"{cfg.system.value}: decision on {ds.dates[t]} "
                                   f"(row {t}) failed: {sol}") from sol
            weights[t - start] = sol.z_star
            audit.append({"t": t, "train_rows": [0, b if learns else start],
                          "error_rows": [idx.start, idx.stop], "feature_row": t})
    Y = ds.Y[start:]
    returns = np.einsum("ij,ij->i", weights, Y)
    wealth = wealth_evolution(weights, Y)
    ann_r, ann_v, sr = performance_stats(returns)
    return BacktestReport(cfg.system.value, ds.asset_names, ds.dates[start:], weights, returns,
                          wealth, ann_r, ann_v, sr, tuple(snapshots), tuple(audit),
                          config=_config_dict(cfg))


def _config_dict(cfg: BacktestConfig) -> dict:
    d = asdict(cfg)
    d["system"] = cfg.system.value
    d["divergence"] = cfg.divergence.value
    d["learn"] = list(cfg.learn)
    d["cv_etas"] = list(cfg.cv_etas)
    d["cv_epochs"] = list(cfg.cv_epochs)
    return d


def audit_temporal_hygiene(report: BacktestReport) -> list[str]:
    """Every decision must depend only on rows ``< t`` (plus features of ``t``).

    ``train_rows`` and ``error_rows`` are half-open ``[lo, hi)`` row ranges.
    Returns a list of violations (empty when clean).
    """
    bad = []
    for e in report.audit:
        t = e["t"]
        if e["train_rows"][1] > t:
            bad.append(f"t={t}: trained on rows up to {e['train_rows'][1] - 1}")
        if e["error_rows"][1] > t:
            bad.append(f"t={t}: errors read row {e['error_rows'][1] - 1}")
        if e["feature_row"] != t:
            bad.append(f"t={t}: features of row {e['feature_row']}")
    return bad


def run_many(ds: AlignedDataset, cfgs, workers: int = 1) -> list[BacktestReport]:
    """Independent systems, optionally in parallel processes."""
    cfgs = list(cfgs)
    if workers > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_backtest, [ds] * len(cfgs), cfgs))
    return [run_backtest(ds, c) for c in cfgs]


# ---------------------------------------------------------------- output

def write_report(report: BacktestReport, out_dir, stem: str | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or report.system.lower().replace("-", "_")
    jpath, cpath = out / f"{stem}.json", out / f"{stem}.csv"
    jpath.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    with cpath.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *report.asset_names, "return", "wealth"])
        for d, z, r, wl in zip(report.dates, report.weights, report.returns, report.wealth):
            w.writerow([d, *(repr(float(v)) for v in z), repr(float(r)), repr(float(wl))])
    return jpath, cpath


def summary_table(reports) -> str:
    """Annualized return, volatility and Sharpe ratio, one column per system."""
    reports = list(reports)
    names = [r.system for r in reports]
    width = max(8, *(len(s) + 2 for s in names))
    head = " " * 16 + "".join(s.rjust(width) for s in names)
    lines = [head,
             "Return (%)".ljust(16) + "".join(f"{100 * r.ann_return:.1f}".rjust(width) for r in reports),
             "Volatility (%)".ljust(16) + "".join(f"{100 * r.ann_vol:.1f}".rjust(width) for r in reports),
             "Sharpe ratio".ljust(16) + "".join(f"{r.sharpe:.2f}".rjust(width) for r in reports),
             "Values are annualized.",
             ]
    return "\n".join(lines)
