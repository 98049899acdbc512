"""Synthetic NN-Nominal vs NN-DR comparison at desk scale.

Each seed draws its own market (n=10, m=5, 1200 rows), trains both
three-layer systems once on the first 70% and scores the rest.

    python scripts/exp5_synthetic.py --seeds 0 1 2 3 4 --out out/exp5
"""

from __future__ import annotations

import argparse
import time
from dataclasses import dataclass
from pathlib import Path

from dre2e.backtest import BacktestConfig, audit_temporal_hygiene, run_backtest, summary_table, write_report
from dre2e.data import SyntheticConfig, generate_synthetic

# desk protocol: one fixed grid cell, one training pass, short error window
PROTOCOL = dict(train_frac=0.7, T=13, v=12, eta=0.0125, epochs=10,
                retrain_interval=10_000, hidden_layers=3, width=32)
SYSTEMS = ("NN-Nominal", "NN-DR")


@dataclass(frozen=True)
class SeedResult:
    seed: int
    sharpe_nominal: float
    sharpe_dr: float
    seconds: float

    @property
    def dr_wins(self) -> bool:
        return self.sharpe_dr >= self.sharpe_nominal


def run_seed(seed: int, out: Path | None = None, **overrides) -> SeedResult:
    t0 = time.perf_counter()
    ds = generate_synthetic(SyntheticConfig(), seed)
    reports = []
    for name in SYSTEMS:
        cfg = BacktestConfig(system=name, seed=seed, **{**PROTOCOL, **overrides})
        rep = run_backtest(ds, cfg)
        bad = audit_temporal_hygiene(rep)
        if bad:
            raise RuntimeError(f"{name} seed {seed}: {bad[0]}")
        reports.append(rep)
        if out is not None:
            write_report(rep, out, f"seed{seed}_{name.lower().replace('-', '_')}")
    if out is not None:
        (out / f"seed{seed}_summary.txt").write_text(summary_table(reports) + "\n")
    return SeedResult(seed, reports[0].sharpe, reports[1].sharpe, time.perf_counter() - t0)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--out", type=Path)
    p.add_argument("--epochs", type=int, default=PROTOCOL["epochs"])
    args = p.parse_args(argv)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
    wins = 0
    print(f"{'seed':>4} {'NN-Nominal':>11} {'NN-DR':>8} {'time':>7}")
    for s in args.seeds:
        r = run_seed(s, args.out, epochs=args.epochs)
        wins += r.dr_wins
        print(f"{s:>4} {r.sharpe_nominal:>11.3f} {r.sharpe_dr:>8.3f} {r.seconds:>6.0f}s", flush=True)
    print(f"NN-DR >= NN-Nominal in {wins} of {len(args.seeds)} seeds")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
