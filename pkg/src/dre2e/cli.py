"""Command-line entry point: ``dre2e synth|cv|backtest|verify``.

Experiment settings live in a flat JSON file; flags only carry paths, the
seed and the output directory. Exit codes: 0 success, 1 usage or config
error, 2 numerical failure. ``DRE2E_THREADS`` caps the worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .backtest import (
    BacktestConfig,
    System,
    _DEFAULT_FLAGS,
    _train_cfg,
    audit_temporal_hygiene,
    initial_state,
    run_many,
    summary_table,
    write_report,
)
from .data import AlignedDataset, DataError, SyntheticConfig, export_csv, generate_synthetic, load_csv, split
from .diffopt import LayerError
from .loss import ZeroVolatility
from .risk import OracleError
from .train import DEFAULT_EPOCHS, DEFAULT_ETAS, TrainingError, time_series_cv, write_cv_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
NUMERICAL_ERRORS = (LayerError, TrainingError, ZeroVolatility, OracleError,
                    np.linalg.LinAlgError, FloatingPointError)
SYSTEM_NAMES = {s.value.lower(): s for s in System}


class ConfigError(ValueError):
    """Bad command line or config file."""


@dataclass(frozen=True)
class RunConfig:
    """Flat run description.

    Data comes from ``features_path``/``assets_path`` when both are set,
    otherwise from the synthetic generator (``synth_*`` keys) at ``seed``.
    ``learn_*`` of None keeps each system's default flags. ``cv_system``
    names the system whose grid ``dre2e cv`` scores.
    """

    features_path: str | None = None
    assets_path: str | None = None
    out_dir: str = "out"
    seed: int = 0
    # synthetic market
    synth_n: int = 10
    synth_m: int = 5
    synth_T0: int = 1200
    synth_alpha_high: float = 0.015
    synth_loading_std: float = 0.015
    synth_noise_std: float = 0.015
    synth_jump_mean: float = 0.015
    synth_jump_probs: tuple[float, float, float] = (0.15, 0.7, 0.15)
    synth_feature_std: float = 0.0125
    synth_noise: bool = True
    synth_jumps: bool = True
    synth_start: str = "2000-01-07"
    # training and backtest
    divergence: str = "hellinger"
    learn_theta: bool | None = None
    learn_gamma: bool | None = None
    learn_delta: bool | None = None
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
    cv_system: str = "DR"
    hidden_layers: int = 3
    width: int = 32
    gamma0: float | None = None
    delta0: float | None = None

    def __post_init__(self):
        if (self.features_path is None) != (self.assets_path is None):
            raise ConfigError("features_path and assets_path must be given together")
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, list):
                object.__setattr__(self, f.name, tuple(val))
        self.synthetic()
        system_of(self.cv_system)
        # DR accepts every learn flag combination; per-system checks run in backtest()
        self.backtest(System.DR)

    # -- loading

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for k, v in raw.items():
            _check_type(k, v, known[k].type)
        try:
            return cls(**raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text()) if path is not None else {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if isinstance(raw, dict):
            raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw)

    # -- views

    def synthetic(self) -> SyntheticConfig:
        kw = {f.name: getattr(self, "synth_" + f.name) for f in fields(SyntheticConfig)}
        try:
            return SyntheticConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synthetic settings: {exc}") from exc

    def _learn_flags(self, system: System):
        flags = (self.learn_theta, self.learn_gamma, self.learn_delta)
        if all(f is None for f in flags):
            return None
        return tuple(d if f is None else f for f, d in zip(flags, _DEFAULT_FLAGS[system]))

    def backtest(self, system: System) -> BacktestConfig:
        try:
            return BacktestConfig(
                system=system, divergence=self.divergence.lower(),
                learn=self._learn_flags(system), retrain_interval=self.retrain_interval,
                train_frac=self.train_frac, T=self.T, v=self.v, mse_weight=self.mse_weight,
                eta=self.eta, epochs=self.epochs, cv_folds=self.cv_folds,
                cv_etas=self.cv_etas, cv_epochs=self.cv_epochs,
                hidden_layers=self.hidden_layers, width=self.width,
                gamma0=self.gamma0, delta0=self.delta0, seed=self.seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{system.value}: {exc}") from exc

    def dataset(self) -> AlignedDataset:
        if self.features_path is None:
            return generate_synthetic(self.synthetic(), self.seed)
        for p in (self.features_path, self.assets_path):
            if not Path(p).is_file():
                raise ConfigError(f"data file not found: {p}")
        return load_csv(self.features_path, self.assets_path)


_TYPES = {"int": int, "float": (int, float), "bool": bool, "str": str}


def _check_type(key, value, annot: str) -> None:
    """Reject obviously mistyped JSON values before any work starts."""
    optional = "None" in annot
    if value is None:
        if not optional:
            raise ConfigError(f"{key} may not be null")
        return
    base = annot.replace(" | None", "")
    if base.startswith("tuple"):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{key} must be a non-empty list")
        inner = base[base.index("[") + 1:].split(",")[0].strip("] ")
        for v in value:
            _check_type(key, v, inner)
        return
    ok = isinstance(value, _TYPES[base]) and not (base != "bool" and isinstance(value, bool))
    if not ok:
        raise ConfigError(f"{key} must be {base}, got {type(value).__name__}")


def system_of(name: str) -> System:
    try:
        return SYSTEM_NAMES[name.strip().lower()]
    except KeyError:
        raise ConfigError(f"unknown system {name!r}; choose from "
                          f"{', '.join(SYSTEM_NAMES)}") from None


def worker_count() -> int:
    raw = os.environ.get("DRE2E_THREADS")
    cap = os.cpu_count() or 1
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DRE2E_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("DRE2E_THREADS must be >= 1")
    return min(n, cap)


def _atomic_outputs(out: Path, names, write) -> list[Path]:
    """Write every file into a scratch dir, then move them into ``out`` together."""
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=out, prefix=".tmp-") as tmp:
        tmp_paths = [Path(tmp) / n for n in names]
        write(*tmp_paths)
        final = [out / n for n in names]
        for src, dst in zip(tmp_paths, final):
            os.replace(src, dst)
    return final


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = RunConfig.load(args.config, seed=args.seed)
    ds = generate_synthetic(cfg.synthetic(), cfg.seed)
    out = Path(args.out or cfg.out_dir)
    paths = _atomic_outputs(out, ["features.csv", "assets.csv"],
                            lambda f, a: export_csv(ds, f, a))
    print(f"wrote {len(ds)} rows to {paths[0]} and {paths[1]}")
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = RunConfig.load(args.config, seed=args.seed, out_dir=args.out)
    system = system_of(cfg.cv_system)
    bcfg = cfg.backtest(system)
    if not any(bcfg.learn):
        raise ConfigError(f"{system.value} learns nothing; there is no grid to score")
    ds = cfg.dataset()
    train_ds, _ = split(ds, bcfg.train_frac)
    init = initial_state(train_ds, bcfg)
    res = time_series_cv(train_ds, init.model, _train_cfg(bcfg, init, bcfg.eta, bcfg.epochs),
                         bcfg.cv_etas, bcfg.cv_epochs, folds=bcfg.cv_folds or 4,
                         workers=worker_count())
    out = Path(cfg.out_dir)
    path, = _atomic_outputs(out, ["cv.csv"], lambda p: write_cv_csv(res, p))
    print(f"{system.value}: best eta={res.best_eta} K={res.best_epochs} "
          f"({len(res.table)} rows in {path})")
    return EXIT_OK


def cmd_backtest(args) -> int:
    cfg = RunConfig.load(args.config, seed=args.seed, out_dir=args.out)
    names = [s for s in args.systems.split(",") if s.strip()]
    if not names:
        raise ConfigError("--systems is empty")
    systems = [system_of(s) for s in names]
    if len(set(systems)) != len(systems):
        raise ConfigError("--systems lists a system twice")
    bcfgs = [cfg.backtest(s) for s in systems]
    ds = cfg.dataset()
    reports = run_many(ds, bcfgs, workers=min(worker_count(), len(bcfgs)))
    out = Path(cfg.out_dir)
    for r in reports:
        bad = audit_temporal_hygiene(r)
        if bad:
            print(f"error: {r.system} failed the temporal hygiene audit: {bad[0]}",
                  file=sys.stderr)
            return EXIT_NUMERIC
        write_report(r, out)
    table = summary_table(reports)
    (out / "summary.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    results = verify.run_all(scale=args.scale)
    for r in results:
        print(r.line(), flush=True)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed"
          + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_OK if not failed else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dre2e", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset as features.csv + assets.csv")
    s.add_argument("--config", help="JSON run config (defaults when omitted)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory (default: out_dir from the config)")
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("cv", help="cross-validate the learning rate and epoch grid")
    c.add_argument("--config", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    c.set_defaults(func=cmd_cv)

    b = sub.add_parser("backtest", help="walk-forward backtest of one or more systems")
    b.add_argument("--config", required=True)
    b.add_argument("--systems", default="ew,po,base,nominal,dr",
                   help=f"comma-separated, from {','.join(SYSTEM_NAMES)}")
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_backtest)

    v = sub.add_parser("verify", help="run the oracle and property checks")
    v.add_argument("--scale", type=float, default=1.0,
                   help="fraction of the full instance counts (default 1)")
    v.add_argument("--quick", dest="scale", action="store_const", const=0.1,
                   help="same as --scale 0.1")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "scale", 1.0) <= 0:
            raise ConfigError("--scale must be positive")
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as exc:  # wrapped training/decision failures from the backtest
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
