import csv

import numpy as np
import pytest

from adaptive_collect import cli
from adaptive_collect.config import ExperimentConfig, load, parse_text, resolve
from adaptive_collect.controller import UniformPolicy
from adaptive_collect.data import Normalizer, make_episodes, write_csv
from adaptive_collect.errors import ConfigError, UsageError
from adaptive_collect.experiment import (
    Workspace,
    action_histogram,
    compare,
    emit_plot_data,
    read_action_histogram,
    run,
)
from adaptive_collect.metrics import MetricReport, write_metrics_csv
from adaptive_collect.predictor import ArKalmanForecaster
from adaptive_collect.sim import run_episodes
from adaptive_collect.synth import generate

TINY = {
    "pred_hidden": 4, "pred_layers": 1, "pred_epochs": 1, "pred_batch": 8, "pred_lr": 1e-3,
    "drqn_dense": "8,8,4", "drqn_hidden": 4, "drqn_episodes": 8, "drqn_envs": 4, "drqn_batch": 4,
    "est_hidden": 4, "est_layers": 1, "est_epochs": 1, "est_batch": 8, "est_lr": 1e-3,
    "max_episodes_per_location": 2,
}


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "occ.csv"
    write_csv(generate(10, 216 * 2, seed=3), path)
    return path


def _cfg(data, **kw):
    return resolve({"data": str(data), **TINY, **kw})


# -- configuration ---------------------------------------------------------------


class TestConfig:
    def test_defaults_round_trip_through_text(self, tmp_path):
        cfg = ExperimentConfig(data="x.csv")
        p = tmp_path / "c.txt"
        p.write_text(cfg.to_text())
        assert load(p) == cfg

    def test_text_parsing(self):
        vals = parse_text("# comment\nseed = 4\n\nw1 = 0.5  # trailing\nest_use_mask = no\npolicy = uniform\n")
        assert vals == {"seed": 4, "w1": 0.5, "est_use_mask": False, "policy": "uniform"}

    def test_precedence(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("data = d.csv\npred_epochs = 3\n")
        assert load(p, preset="desk").pred_epochs == 3
        assert load(p, {"pred_epochs": "5"}, preset="desk").pred_epochs == 5
        assert load(p, preset="desk").drqn_episodes == 1200
        assert load(p).drqn_episodes == 5000

    @pytest.mark.parametrize(
        "text",
        ["data = d\npolicy = greedy", "data = d\nbogus = 1", "data = d\nseed = 1.5", "policy = uniform",
         "data = d\nsplit = 0.5,0.5", "data = d\nbudget = 0", "data = d\npredictor = none", "just words"],
    )
    def test_invalid_configs(self, tmp_path, text):
        p = tmp_path / "c.txt"
        p.write_text(text + "\n")
        with pytest.raises(ConfigError):
            load(p)

    def test_label(self):
        assert ExperimentConfig().label == "lstm+drqn+lstm"
        assert ExperimentConfig(name="full").label == "full"

    def test_table_configurations_expressible(self):
        for pred, pol, est in [("lstm", "drqn", "lstm"), ("none", "uniform", "gpr"),
                               ("ar4_kalman", "uniform", "lstm"), ("lstm", "uniform", "lstm")]:
            resolve({"data": "d", "predictor": pred, "policy": pol, "estimator": est})


# -- compare -----------------------------------------------------------------------


def _fake_run(tmp_path, name, label, rmse, coverage=1.0):
    d = tmp_path / name
    d.mkdir()
    write_metrics_csv(d / "metrics.csv", [(label, MetricReport(rmse, rmse, 10.0, coverage))])
    return d


class TestCompare:
    def test_identical_runs_zero_delta(self, tmp_path):
        a = _fake_run(tmp_path, "a", "x", 0.03)
        b = _fake_run(tmp_path, "b", "y", 0.03)
        c = compare([a, b])
        np.testing.assert_array_equal(c.deltas, 0.0)
        assert "+0.00%" in c.render()

    def test_halving(self, tmp_path):
        a = _fake_run(tmp_path, "a", "base", 0.04)
        b = _fake_run(tmp_path, "b", "new", 0.02)
        c = compare([a, b])
        assert c.deltas[c.labels.index("new"), 0] == pytest.approx(-50.0)
        assert "-50.00%" in c.render()

    def test_three_runs_sorted_by_label(self, tmp_path):
        dirs = [_fake_run(tmp_path, n, lab, r) for n, lab, r in [("1", "zeta", 0.1), ("2", "alpha", 0.2), ("3", "mid", 0.3)]]
        c = compare(dirs)
        assert c.labels == ["alpha", "mid", "zeta"]
        assert c.reference == 2
        header = c.render().splitlines()[0].split()
        assert header == ["metric", "alpha", "mid", "zeta", "(ref)"]
        assert len(c.render().splitlines()) == 5

    def test_missing_metrics_names_run(self, tmp_path):
        a = _fake_run(tmp_path, "a", "x", 0.03)
        (tmp_path / "ghost").mkdir()
        with pytest.raises(UsageError, match="ghost"):
            compare([a, tmp_path / "ghost"])

    def test_needs_two(self, tmp_path):
        with pytest.raises(UsageError):
            compare([_fake_run(tmp_path, "a", "x", 0.03)])


# -- plot data and histograms ---------------------------------------------------------


@pytest.fixture(scope="module")
def episode_logs():
    ds = generate(3, 216 * 2, seed=8)
    eps = [e for s in ds.series for e in make_episodes(s / ds.series.max())]
    return eps, run_episodes(eps, ArKalmanForecaster(), UniformPolicy(7))


def test_plot_data_contract(episode_logs, tmp_path):
    eps, logs = episode_logs
    for e, lg in zip(eps, logs):
        rows = emit_plot_data(lg, e.target, path=tmp_path / "p.csv")
        assert len(rows) == 168
        assert sum(r[4] for r in rows) == len(lg.observation_times)
        assert [r[1] for r in rows] == list(e.target)
    with (tmp_path / "p.csv").open() as fh:
        assert len(list(csv.reader(fh))) == 169


def test_plot_data_denormalizes(episode_logs):
    eps, logs = episode_logs
    norm = Normalizer(0.0, 2.0)
    rows = emit_plot_data(logs[0], eps[0].target, normalizer=norm)
    np.testing.assert_allclose([r[2] for r in rows], 2.0 * logs[0].profile.values)


def test_action_histogram_counts(episode_logs):
    eps, logs = episode_logs
    days, hours = action_histogram(logs, [e.hour_of_day_offset for e in eps])
    per_episode = sum(len(lg.observation_times) - 1 for lg in logs)
    assert days.sum() == hours.sum() == per_episode
    assert days.shape == (7,) and hours.shape == (24,)


# -- end-to-end runs ----------------------------------------------------------------


def _ckpts(out):
    return sorted(p.name for p in (out / "checkpoints").iterdir())


def test_baseline_run_trains_nothing(data_csv, tmp_path):
    ws = Workspace()
    res = run(_cfg(data_csv, predictor="none", policy="uniform", estimator="gpr"), tmp_path / "r", ws)
    assert not ws.predictors and not ws.policies and not ws.estimators
    assert _ckpts(res.out_dir) == []
    assert not list(res.out_dir.glob("*_log.csv"))
    for lg in res.evaluation.logs:
        assert lg.observation_times == list(range(0, 163, 6))


def test_full_run_artifacts(data_csv, tmp_path):
    res = run(_cfg(data_csv), tmp_path / "full")
    out = res.out_dir
    for name in ("metrics.csv", "episodes.csv", "estimates.csv", "action_histogram.csv", "config.txt",
                 "predictor_log.csv", "drqn_log.csv", "estimator_log.csv"):
        assert (out / name).is_file(), name
    assert _ckpts(out) == ["drqn.npz", "estimator.npz", "predictor.npz"]
    assert load(out / "config.txt") == res.config
    hist = read_action_histogram(out / "action_histogram.csv")
    assert hist["day"].shape == (7,) and hist["hour"].shape == (24,)
    n_test = len(res.evaluation.logs)
    with (out / "episodes.csv").open() as fh:
        assert sum(1 for _ in fh) == 1 + 168 * n_test


def test_rerun_metrics_byte_identical(data_csv, tmp_path):
    cfg = _cfg(data_csv, seed=2)
    a = run(cfg, tmp_path / "a")
    b = run(cfg, tmp_path / "b")
    assert (a.out_dir / "metrics.csv").read_bytes() == (b.out_dir / "metrics.csv").read_bytes()
    assert (a.out_dir / "episodes.csv").read_bytes() == (b.out_dir / "episodes.csv").read_bytes()


def test_workspace_cache_matches_fresh_run(data_csv, tmp_path):
    ws = Workspace()
    run(_cfg(data_csv, estimator="none"), tmp_path / "warm", ws)
    cached = run(_cfg(data_csv), tmp_path / "cached", ws)
    fresh = run(_cfg(data_csv), tmp_path / "fresh")
    assert (cached.out_dir / "metrics.csv").read_bytes() == (fresh.out_dir / "metrics.csv").read_bytes()


def test_missing_data_file(tmp_path):
    with pytest.raises(UsageError, match="not found"):
        run(resolve({"data": str(tmp_path / "nope.csv")}), tmp_path / "o")


# -- command line ---------------------------------------------------------------------


class TestCli:
    def test_run_compare_plot(self, data_csv, tmp_path, capsys):
        conf = tmp_path / "c.txt"
        conf.write_text(f"data = {data_csv}\npredictor = ar4_kalman\npolicy = uniform\nestimator = gpr\n")
        assert cli.main(["run", "--config", str(conf), "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["run", "--config", str(conf), "--out", str(tmp_path / "b"), "--set", "estimator=none"]) == 0
        capsys.readouterr()
        assert cli.main(["compare", str(tmp_path / "a"), str(tmp_path / "b")]) == 0
        assert "rmse" in capsys.readouterr().out
        assert cli.main(["plot", "--run", str(tmp_path / "a"), "--episode", "0"]) == 0
        with (tmp_path / "a" / "plot_episode_0.csv").open() as fh:
            assert len(list(csv.reader(fh))) == 169

    def test_synth(self, tmp_path):
        out = tmp_path / "s.csv"
        assert cli.main(["synth", "--out", str(out), "--locations", "2", "--hours", "48"]) == 0
        assert len(out.read_text().splitlines()) == 49

    @pytest.mark.parametrize(
        "argv_tail, code",
        [(["--set", "policy=greedy"], 2), (["--set", "nokey"], 2), (["--set", "data=/nonexistent.csv"], 2)],
    )
    def test_usage_errors(self, data_csv, tmp_path, capsys, argv_tail, code):
        conf = tmp_path / "c.txt"
        conf.write_text(f"data = {data_csv}\n")
        assert cli.main(["run", "--config", str(conf), "--out", str(tmp_path / "o"), *argv_tail]) == code
        assert capsys.readouterr().err.startswith("usage error:")

    def test_data_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("timestamp,a\n2020-01-01 00:00,xyz\n")
        conf = tmp_path / "c.txt"
        conf.write_text(f"data = {bad}\npredictor = none\npolicy = uniform\nestimator = none\n")
        assert cli.main(["run", "--config", str(conf), "--out", str(tmp_path / "o")]) == 3
        assert capsys.readouterr().err.startswith("data error:")

    def test_missing_config(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "none.txt")]) == 2

    def test_compare_missing_run(self, tmp_path, capsys):
        assert cli.main(["compare", str(tmp_path / "x"), str(tmp_path / "y")]) == 2
        assert "x" in capsys.readouterr().err
