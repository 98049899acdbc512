"""Task losses: prediction MSE, negative Sharpe ratio, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ZeroVolatility(ValueError):
    """Portfolio returns over the horizon are constant."""


# std below this fraction of the return scale counts as zero
VOL_FLOOR = 1e-12


@dataclass(frozen=True)
class TaskLossConfig:
    mse_weight: float = 0.5
    v: int = 12  # horizon; the Sharpe window holds v + 1 returns

    def __post_init__(self):
        if not self.mse_weight >= 0:
            raise ValueError(f"mse_weight must be >= 0, got {self.mse_weight}")
        if self.v < 1:
            raise ValueError(f"v must be >= 1, got {self.v}")


def mse_loss(yhat, y) -> tuple[float, np.ndarray]:
    yhat = np.asarray(yhat, dtype=float)
    y = np.asarray(y, dtype=float)
    if yhat.shape != y.shape or yhat.ndim != 1:
        raise ValueError(f"shapes {yhat.shape} and {y.shape} differ")
    r = yhat - y
    return float(r @ r) / r.size, (2.0 / r.size) * r


def sharpe_loss(z_star, realized) -> tuple[float, np.ndarray]:
    """``-mean/std`` of the portfolio returns ``realized @ z`` (sample std)."""
    z = np.asarray(z_star, dtype=float)
    Y = np.asarray(realized, dtype=float)
    if Y.ndim != 2 or Y.shape[1] != z.size or Y.shape[0] < 2:
        raise ValueError(f"realized must be (v+1, {z.size}) with v >= 1, got {Y.shape}")
    r = Y @ z
    N = r.size
    mu = r.mean()
    dev = r - mu
    sd = np.sqrt(dev @ dev / (N - 1))
    if not sd > VOL_FLOOR * max(np.abs(r).max(), VOL_FLOOR):
        raise ZeroVolatility("portfolio returns are constant over the horizon")
    value = -mu / sd
    # d(-mu/sd)/dr = -1/(N sd) + mu (r - mu) / ((N-1) sd^3)
    d_r = -1.0 / (N * sd) + mu * dev / ((N - 1) * sd ** 3)
    return float(value), Y.T @ d_r


def task_loss(z_star, yhat_t, realized, cfg: TaskLossConfig = TaskLossConfig()):
    """``w * mse(yhat_t, y_t) + sharpe(z*, y_t..y_{t+v})``.

    ``realized`` holds the ``v + 1`` return rows starting at ``t``; its first
    row is the target of ``yhat_t``. Returns ``(value, d_z, d_yhat)``.
    """
    Y = np.asarray(realized, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != cfg.v + 1:
        raise ValueError(f"realized must have v+1={cfg.v + 1} rows, got {Y.shape}")
    sr, d_z = sharpe_loss(z_star, Y)
    mse, d_yhat = mse_loss(yhat_t, Y[0])
    return cfg.mse_weight * mse + sr, d_z, cfg.mse_weight * d_yhat
