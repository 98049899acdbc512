"""Weekly feature/return data: CSV ingestion, lag alignment, splits, synthetic market.

Row ``k`` of an :class:`AlignedDataset` pairs features observed on
``feature_dates[k]`` with asset returns realized one week later on
``dates[k]``. A prediction for row ``k`` may therefore use ``X[k]`` but
nothing from ``Y[k]`` onward.

CSV schema (both files): header ``date,<name>,<name>,...``; ISO-8601 dates,
strictly increasing; decimal returns (0.01 is 1%).
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LAG = dt.timedelta(days=7)


class DataError(ValueError):
    """Malformed, non-monotone or non-finite input data."""


@dataclass(frozen=True)
class AlignedDataset:
    dates: tuple[str, ...]  # return dates
    feature_dates: tuple[str, ...]
    X: np.ndarray  # T0 x m
    Y: np.ndarray  # T0 x n
    feature_names: tuple[str, ...]
    asset_names: tuple[str, ...]

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise DataError(f"X {X.shape} and Y {Y.shape} must be 2-d with equal rows")
        if not (len(self.dates) == len(self.feature_dates) == X.shape[0]):
            raise DataError("date columns do not match the data rows")
        if len(self.feature_names) != X.shape[1] or len(self.asset_names) != Y.shape[1]:
            raise DataError("column names do not match the data columns")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise DataError("dataset has non-finite entries")
        d = [dt.date.fromisoformat(s) for s in self.dates]
        f = [dt.date.fromisoformat(s) for s in self.feature_dates]
        if any(b <= a for a, b in zip(d, d[1:])):
            raise DataError("return dates are not strictly increasing")
        # no look-ahead: every feature row predates its return row
        if any(fk >= dk for fk, dk in zip(f, d)):
            raise DataError("a feature date is not earlier than its return date")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.Y.shape[1]

    def rows(self, start: int, stop: int) -> "AlignedDataset":
        """Chronological slice ``[start, stop)``."""
        sl = slice(start, stop)
        return AlignedDataset(self.dates[sl], self.feature_dates[sl], self.X[sl].copy(),
                              self.Y[sl].copy(), self.feature_names, self.asset_names)


def concat(a: AlignedDataset, b: AlignedDataset) -> AlignedDataset:
    if a.feature_names != b.feature_names or a.asset_names != b.asset_names:
        raise DataError("cannot concatenate datasets with different columns")
    return AlignedDataset(a.dates + b.dates, a.feature_dates + b.feature_dates,
                          np.vstack([a.X, b.X]), np.vstack([a.Y, b.Y]),
                          a.feature_names, a.asset_names)


# ---------------------------------------------------------------------- CSV

def _read_series(path) -> tuple[list[dt.date], np.ndarray, tuple[str, ...]]:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0].lower() != "date":
        raise DataError(f"{path}: header must be 'date,<series>,...'")
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    dates, values = [], []
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")
        try:
            dates.append(dt.date.fromisoformat(r[0].strip()))
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad date {r[0]!r}") from None
        try:
            vals = [float(v) for v in r[1:]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric cell") from None
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"{path}:{lineno}: NaN or infinite cell")
        values.append(vals)
    if any(b <= a for a, b in zip(dates, dates[1:])):
        raise DataError(f"{path}: dates are not strictly increasing")
    return dates, np.array(values, dtype=float), tuple(header[1:])


def load_csv(features_path, assets_path) -> AlignedDataset:
    """Pair features dated ``d`` with returns dated ``d + 7 days``.

    Feature rows without a matching return row (and vice versa) are dropped.
    """
    fd, F, fnames = _read_series(features_path)
    ad, R, anames = _read_series(assets_path)
    ret_index = {d: i for i, d in enumerate(ad)}
    pairs = [(i, ret_index[d + LAG]) for i, d in enumerate(fd) if d + LAG in ret_index]
    if not pairs:
        raise DataError("no feature date has a return one week later")
    fi = [i for i, _ in pairs]
    ri = [j for _, j in pairs]
    return AlignedDataset(tuple(ad[j].isoformat() for j in ri),
                          tuple(fd[i].isoformat() for i in fi),
                          F[fi], R[ri], fnames, anames)


def _write_series(path, dates, values, names) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *names])
        for d, row in zip(dates, values):
            w.writerow([d, *(repr(float(v)) for v in row)])


def export_csv(ds: AlignedDataset, features_path, assets_path) -> None:
    """Write ``ds`` in the input schema; ``load_csv`` reads it back exactly."""
    _write_series(features_path, ds.feature_dates, ds.X, ds.feature_names)
    _write_series(assets_path, ds.dates, ds.Y, ds.asset_names)


def split(ds: AlignedDataset, train_frac: float = 0.6) -> tuple[AlignedDataset, AlignedDataset]:
    """Chronological split; the training part gets ``round(frac * T0)`` rows."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    k = int(math.floor(train_frac * len(ds) + 0.5))
    if not 0 < k < len(ds):
        raise ValueError(f"split of {len(ds)} rows at {train_frac} leaves an empty side")
    return ds.rows(0, k), ds.rows(k, len(ds))


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticConfig:
    """Linear factor market with Gaussian noise and signed exponential jumps.

    ``loading_std``, ``noise_std`` and ``feature_std`` are standard
    deviations; ``jump_mean`` is the mean of the exponential jump size.
    """

    n: int = 10
    m: int = 5
    T0: int = 1200
    alpha_high: float = 0.015
    loading_std: float = 0.015
    noise_std: float = 0.015
    jump_mean: float = 0.015
    jump_probs: tuple[float, float, float] = (0.15, 0.7, 0.15)  # kappa = -1, 0, 1
    feature_std: float = 0.0125
    noise: bool = True
    jumps: bool = True
    start: str = "2000-01-07"

    def __post_init__(self):
        if min(self.n, self.m, self.T0) < 1:
            raise ValueError("n, m and T0 must be positive")
        p = self.jump_probs
        if len(p) != 3 or min(p) < 0 or abs(sum(p) - 1.0) > 1e-12:
            raise ValueError(f"jump_probs must be 3 probabilities summing to 1, got {p}")
        for name in ("alpha_high", "loading_std", "noise_std", "jump_mean", "feature_std"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        dt.date.fromisoformat(self.start)


def synthetic_model(cfg: SyntheticConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """The biases ``alpha`` (n) and loadings ``beta`` (m x n) behind a seed."""
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(0.0, cfg.alpha_high, size=cfg.n)
    beta = rng.normal(0.0, cfg.loading_std, size=(cfg.m, cfg.n))
    return alpha, beta


def draw_kappa(rng: np.random.Generator, probs, size) -> np.ndarray:
    return rng.choice(np.array([-1.0, 0.0, 1.0]), p=np.asarray(probs), size=size)


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig(), seed: int = 0) -> AlignedDataset:
    """``y_t = alpha + beta^T x_t + noise_t + kappa_t * jump_t``, deterministic per seed."""
    rng = np.random.default_rng(seed)
    # same stream as synthetic_model: alpha and beta come first
    alpha = rng.uniform(0.0, cfg.alpha_high, size=cfg.n)
    beta = rng.normal(0.0, cfg.loading_std, size=(cfg.m, cfg.n))
    X = rng.normal(0.0, cfg.feature_std, size=(cfg.T0, cfg.m))
    noise = rng.normal(0.0, cfg.noise_std, size=(cfg.T0, cfg.n))
    kappa = draw_kappa(rng, cfg.jump_probs, cfg.T0)
    omega = rng.exponential(cfg.jump_mean, size=(cfg.T0, cfg.n))
    Y = alpha + X @ beta
    if cfg.noise:
        Y = Y + noise
    if cfg.jumps:
        Y = Y + kappa[:, None] * omega
    start = dt.date.fromisoformat(cfg.start)
    dates = tuple((start + LAG * (k + 1)).isoformat() for k in range(cfg.T0))
    fdates = tuple((start + LAG * k).isoformat() for k in range(cfg.T0))
    return AlignedDataset(dates, fdates, X, Y,
                          tuple(f"f{i + 1}" for i in range(cfg.m)),
                          tuple(f"a{i + 1}" for i in range(cfg.n)))
