import json

import pytest

from dre2e import cli, diffopt, verify

SMALL = {
    "synth_n": 4, "synth_m": 3, "synth_T0": 100,
    "T": 8, "v": 3, "epochs": 2, "retrain_interval": 20, "width": 8,
}


def config(tmp_path, **kw):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({**SMALL, "out_dir": str(tmp_path / "out"), **kw}))
    return str(path)


def run(*argv):
    return cli.main(list(argv))


# ------------------------------------------------------------------ config

def test_defaults_validate():
    cfg = cli.RunConfig()
    assert cfg.synthetic().T0 == 1200
    assert cfg.backtest(cli.System.DR).retrain_interval == 104


@pytest.mark.parametrize("bad", [
    {"no_such_key": 1},
    {"T": "8"},
    {"T": True},
    {"eta": -1.0},
    {"epochs": 0},
    {"train_frac": 1.5},
    {"cv_folds": 3},
    {"divergence": "kl"},
    {"features_path": "x.csv"},
    {"synth_jump_probs": [0.5, 0.5]},
    {"cv_system": "nope"},
])
def test_bad_configs_are_rejected(tmp_path, bad):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    with pytest.raises(cli.ConfigError):
        cli.RunConfig.load(path)


def test_config_must_be_an_object(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("[1, 2]")
    with pytest.raises(cli.ConfigError):
        cli.RunConfig.load(path)


# ------------------------------------------------------------------- synth

def test_synth_default_size(tmp_path):
    assert run("synth", "--out", str(tmp_path)) == 0
    for name in ("features.csv", "assets.csv"):
        assert len((tmp_path / name).read_text().splitlines()) == 1201


def test_synth_is_byte_identical(tmp_path):
    cfg = config(tmp_path)
    assert run("synth", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "a")) == 0
    assert run("synth", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "b")) == 0
    for name in ("features.csv", "assets.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_bad_key_leaves_no_files(tmp_path, capsys):
    cfg = config(tmp_path, bogus=1)
    out = tmp_path / "never"
    assert run("synth", "--config", cfg, "--out", str(out)) == 1
    assert not out.exists()
    assert "bogus" in capsys.readouterr().err


# ---------------------------------------------------------------------- cv

def cv_rows(path):
    return (path / "cv.csv").read_text().splitlines()[1:]


def test_cv_single_cell(tmp_path):
    cfg = config(tmp_path, cv_etas=[0.01], cv_epochs=[1], cv_folds=1, cv_system="nominal")
    assert run("cv", "--config", cfg) == 0
    assert len(cv_rows(tmp_path / "out")) == 1


def test_cv_four_folds(tmp_path):
    cfg = config(tmp_path, synth_T0=200, cv_etas=[0.01, 0.02], cv_epochs=[1, 2], cv_system="nominal")
    assert run("cv", "--config", cfg, "--out", str(tmp_path / "a")) == 0
    assert run("cv", "--config", cfg, "--out", str(tmp_path / "b")) == 0
    assert len(cv_rows(tmp_path / "a")) == 4 * 4
    assert (tmp_path / "a" / "cv.csv").read_bytes() == (tmp_path / "b" / "cv.csv").read_bytes()


def test_cv_needs_something_to_learn(tmp_path):
    assert run("cv", "--config", config(tmp_path, cv_system="po")) == 1


# ---------------------------------------------------------------- backtest

def test_equal_weight_makes_no_solver_calls(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("solver called")

    monkeypatch.setattr(diffopt, "solve_cone_program", boom)
    monkeypatch.setattr(diffopt, "solve_cone_batch", boom)
    assert run("backtest", "--config", config(tmp_path), "--systems", "ew") == 0
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["ew.csv", "ew.json", "summary.txt"]


def test_one_report_per_system(tmp_path, capsys):
    assert run("backtest", "--config", config(tmp_path), "--systems", "ew,po,base,nominal,dr") == 0
    names = sorted(p.name for p in (tmp_path / "out").glob("*.json"))
    assert names == ["base.json", "dr.json", "ew.json", "nominal.json", "po.json"]
    assert "Sharpe ratio" in capsys.readouterr().out


def test_backtest_is_byte_identical(tmp_path, monkeypatch):
    cfg = config(tmp_path)
    assert run("backtest", "--config", cfg, "--systems", "nominal,nn-dr", "--out", str(tmp_path / "a")) == 0
    monkeypatch.setenv("DRE2E_THREADS", "2")
    assert run("backtest", "--config", cfg, "--systems", "nominal,nn-dr", "--out", str(tmp_path / "b")) == 0
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_missing_data_is_a_clear_error(tmp_path, capsys):
    cfg = config(tmp_path, features_path=str(tmp_path / "nope.csv"), assets_path=str(tmp_path / "nope2.csv"))
    assert run("backtest", "--config", cfg, "--systems", "ew") == 1
    assert "data file not found" in capsys.readouterr().err


def test_backtest_reads_exported_csv(tmp_path):
    assert run("synth", "--config", config(tmp_path), "--out", str(tmp_path / "data")) == 0
    cfg = config(tmp_path, features_path=str(tmp_path / "data" / "features.csv"),
                 assets_path=str(tmp_path / "data" / "assets.csv"))
    assert run("backtest", "--config", cfg, "--systems", "ew,po") == 0


@pytest.mark.parametrize("systems", ["", "ew,ew", "ew,xyz"])
def test_bad_system_lists(tmp_path, systems):
    assert run("backtest", "--config", config(tmp_path), "--systems", systems) == 1


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def fail(*a, **k):
        raise diffopt.LayerError("injected")

    monkeypatch.setattr(diffopt, "solve_cone_batch", fail)
    monkeypatch.setattr(diffopt, "solve_cone_program", fail)
    assert run("backtest", "--config", config(tmp_path), "--systems", "po") == 2


# ------------------------------------------------------------------ verify

def test_verify_quick_passes(capsys):
    assert run("verify", "--scale", "0.05") == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_verify_names_a_corrupted_tolerance(monkeypatch, capsys):
    monkeypatch.setitem(verify.TOLERANCES, "symmetry", -1.0)
    assert run("verify", "--scale", "0.05") == 2
    out = capsys.readouterr().out
    assert "FAIL symmetry" in out and "failed: symmetry" in out


# ---------------------------------------------------------------- plumbing

def test_usage_errors():
    assert run() == 1
    assert run("frobnicate") == 1
    assert run("backtest") == 1
    assert run("verify", "--scale", "0") == 1


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("DRE2E_THREADS", raising=False)
    assert cli.worker_count() == 1
    monkeypatch.setenv("DRE2E_THREADS", "100000")
    assert 1 <= cli.worker_count() <= 100000
    monkeypatch.setenv("DRE2E_THREADS", "zero")
    with pytest.raises(cli.ConfigError):
        cli.worker_count()
