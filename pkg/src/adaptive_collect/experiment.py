"""End-to-end runs: train the components a configuration needs, evaluate, write artifacts.

A run directory holds::

    config.txt             resolved configuration, every field
    metrics.csv            one row: config label and the four metrics
    episodes.csv           per test episode and hour: truth, profile, forecast, estimate
    estimates.csv          per test episode: the estimated profile on one row
    action_histogram.csv   observations per day and per hour of day
    checkpoints/*.npz      trained parameters
    *_log.csv              training curves

Trained components can be shared between runs of one process through a
:class:`Workspace`; every component draws from its own seeded stream, so a
cached component is identical to a freshly trained one.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import config as config_mod
from .config import ExperimentConfig
from .controller import STATE_DIM, DrqnPolicy, UniformPolicy, init_drqn
from .data import (
    EpisodeInstance,
    Normalizer,
    SplitSpec,
    dataset_episodes,
    fit_normalizer,
    load_csv,
    normalize_episode,
    split_locations,
)
from .errors import StructuralError, UsageError
from .estimator import EstimatorConfig, GprEstimator, LstmEstimator, train_estimator
from .metrics import METRIC_COLUMNS, MetricReport, read_metrics_csv, write_metrics_csv
from .nn import save_params
from .predictor import (
    ArKalmanForecaster,
    HoldForecaster,
    LstmForecaster,
    PredictorConfig,
    train_predictor,
)
from .sim import EpisodeConfig, EpisodeLog, Evaluation, TrainConfig, evaluate_configuration, run_episodes, run_training

log = logging.getLogger(__name__)

# sub-stream ids for np.random.default_rng([seed, id])
_PREDICTOR_STREAM, _DRQN_STREAM, _ESTIMATOR_STREAM, _EVAL_STREAM = 1, 2, 3, 4

_DATA_KEYS = ("data", "seed", "split", "train_locations", "val_locations", "test_locations", "max_episodes_per_location")
_PRED_KEYS = _DATA_KEYS + ("predictor", "pred_hidden", "pred_layers", "pred_epochs", "pred_batch", "pred_lr", "clip")
_EPISODE_KEYS = ("horizon", "budget", "window", "w1", "w2", "seq_len")
_DRQN_KEYS = (
    "drqn_dense", "drqn_hidden", "drqn_episodes", "drqn_envs", "drqn_batch", "drqn_lr",
    "drqn_train_per_decision", "gamma", "sync_every", "buffer_size", "eps_start", "eps_end", "eps_decay_frac",
)
_POLICY_KEYS = _PRED_KEYS + _EPISODE_KEYS + ("policy", "uniform_interval") + _DRQN_KEYS
_EST_KEYS = _POLICY_KEYS + ("estimator", "est_hidden", "est_layers", "est_epochs", "est_batch", "est_lr", "est_use_mask")


def _key(cfg: ExperimentConfig, names: Sequence[str]) -> tuple:
    return tuple(getattr(cfg, n) for n in names)


def _stream(cfg: ExperimentConfig, sid: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, sid])


@dataclass
class PreparedData:
    normalizer: Normalizer
    train: list[EpisodeInstance]
    val: list[EpisodeInstance]
    test: list[EpisodeInstance]
    test_raw: list[EpisodeInstance]


@dataclass
class Component:
    obj: Any
    params: dict | None = None
    meta: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


@dataclass
class Workspace:
    """In-memory cache of loaded data and trained components."""

    datasets: dict = field(default_factory=dict)
    prepared: dict = field(default_factory=dict)
    predictors: dict = field(default_factory=dict)
    policies: dict = field(default_factory=dict)
    estimators: dict = field(default_factory=dict)


@dataclass
class RunResult:
    config: ExperimentConfig
    out_dir: Path
    evaluation: Evaluation

    @property
    def report(self) -> MetricReport:
        return self.evaluation.report


def episode_config(cfg: ExperimentConfig) -> EpisodeConfig:
    return EpisodeConfig(cfg.horizon, cfg.budget, cfg.window, cfg.w1, cfg.w2, cfg.seq_len)


# -- component construction ----------------------------------------------------


def prepare_data(cfg: ExperimentConfig, ws: Workspace) -> PreparedData:
    key = _key(cfg, _DATA_KEYS)
    if key in ws.prepared:
        return ws.prepared[key]
    path = str(Path(cfg.data).resolve())
    if path not in ws.datasets:
        ws.datasets[path] = load_csv(path)
    tr, va, te = split_locations(ws.datasets[path], SplitSpec(cfg.split_ratios, cfg.seed))

    def cap(ds, n):
        return ds.subset(range(min(n, ds.n_locations))) if n > 0 else ds

    tr, va, te = cap(tr, cfg.train_locations), cap(va, cfg.val_locations), cap(te, cfg.test_locations)
    if tr.n_locations == 0 or te.n_locations == 0:
        raise StructuralError("split leaves no training or test locations")
    norm = fit_normalizer(tr)
    per = cfg.max_episodes_per_location or None
    test_raw = dataset_episodes(te, per)
    prepared = PreparedData(
        norm,
        [normalize_episode(norm, e) for e in dataset_episodes(tr, per)],
        [normalize_episode(norm, e) for e in dataset_episodes(va, per)] if va.n_locations else [],
        [normalize_episode(norm, e) for e in test_raw],
        test_raw,
    )
    if not prepared.train or not prepared.test:
        raise StructuralError("series are shorter than one 216-hour episode window")
    ws.prepared[key] = prepared
    return prepared


def training_variance(data: PreparedData) -> float:
    return float(np.var(np.concatenate([np.concatenate([e.history, e.target]) for e in data.train])))


def build_forecaster(cfg: ExperimentConfig, data: PreparedData, ws: Workspace) -> Component:
    if cfg.predictor == "none":
        return Component(HoldForecaster())
    if cfg.predictor == "ar4_kalman":
        return Component(ArKalmanForecaster())
    key = _key(cfg, _PRED_KEYS)
    if key not in ws.predictors:
        pc = PredictorConfig(cfg.pred_hidden, cfg.pred_layers, cfg.pred_epochs, cfg.pred_batch, cfg.pred_lr, cfg.clip, cfg.seed)
        pp, history = train_predictor(data.train, pc, data.val, _stream(cfg, _PREDICTOR_STREAM))
        meta = {"kind": "predictor", "hidden": pp.hidden, "n_layers": pp.n_layers}
        ws.predictors[key] = Component(LstmForecaster(pp), pp.params, meta, history)
    return ws.predictors[key]


def build_policy(cfg: ExperimentConfig, data: PreparedData, forecaster: Component, ws: Workspace) -> Component:
    if cfg.policy == "uniform":
        return Component(UniformPolicy(cfg.uniform_interval))
    key = _key(cfg, _POLICY_KEYS)
    if key not in ws.policies:
        rng = _stream(cfg, _DRQN_STREAM)
        dp = init_drqn(STATE_DIM, cfg.drqn_dense_widths, cfg.drqn_hidden, cfg.window, rng)
        tc = TrainConfig(
            cfg.drqn_episodes, cfg.drqn_envs, cfg.drqn_batch, cfg.drqn_lr, cfg.gamma, cfg.sync_every,
            cfg.buffer_size, cfg.eps_start, cfg.eps_end, cfg.eps_decay_frac, cfg.clip, cfg.drqn_train_per_decision,
        )
        dp, history = run_training(dp, forecaster.obj, data.train, episode_config(cfg), tc, rng)
        meta = {"kind": "drqn", "dense": list(cfg.drqn_dense_widths), "hidden": cfg.drqn_hidden, "n_actions": cfg.window}
        ws.policies[key] = Component(DrqnPolicy(dp, 0.0, cfg.seq_len), dp.theta, meta, history)
    return ws.policies[key]


def build_estimator(
    cfg: ExperimentConfig, data: PreparedData, forecaster: Component, policy: Component, ws: Workspace
) -> Component | None:
    if cfg.estimator == "none":
        return None
    if cfg.estimator == "gpr":
        signal = cfg.gpr_signal_var or training_variance(data)
        return Component(GprEstimator(cfg.gpr_length_scale, signal, cfg.gpr_noise_var))
    key = _key(cfg, _EST_KEYS)
    if key not in ws.estimators:
        ec = episode_config(cfg)
        rng = _stream(cfg, _ESTIMATOR_STREAM)
        # profiles come from the deployed (greedy) pipeline on train and val episodes
        train_logs = run_episodes(data.train, forecaster.obj, policy.obj, ec, rng)
        val_logs = run_episodes(data.val, forecaster.obj, policy.obj, ec, rng) if data.val else []
        econf = EstimatorConfig(
            cfg.est_hidden, cfg.est_layers, cfg.est_use_mask, cfg.est_epochs, cfg.est_batch, cfg.est_lr, cfg.clip
        )
        ep, history = train_estimator(
            [lg.profile for lg in train_logs],
            [e.target[: cfg.horizon] for e in data.train],
            econf,
            [lg.profile for lg in val_logs],
            [e.target[: cfg.horizon] for e in data.val],
            rng,
        )
        meta = {"kind": "estimator", "hidden": ep.hidden, "n_layers": ep.n_layers, "use_mask": ep.use_mask}
        ws.estimators[key] = Component(LstmEstimator(ep), ep.params, meta, history)
    return ws.estimators[key]


# -- artifacts -----------------------------------------------------------------


def _write_records(path: Path, records: list[dict]) -> None:
    if not records:
        return
    cols = list(records[0])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (r.get(c, "") for c in cols)])


def action_histogram(logs: Sequence[EpisodeLog], offsets: Sequence[int], horizon: int = 168):
    """Policy-chosen observations (index 0 excluded) per day and per hour of day."""
    n_days = math.ceil(horizon / 24)
    days = np.zeros(n_days, np.int64)
    hours = np.zeros(24, np.int64)
    for lg, off in zip(logs, offsets):
        for t in lg.observation_times[1:]:
            days[t // 24] += 1
            hours[(off + t) % 24] += 1
    return days, hours


def write_action_histogram(path: Path, logs: Sequence[EpisodeLog], offsets: Sequence[int], horizon: int = 168) -> None:
    days, hours = action_histogram(logs, offsets, horizon)
    n = max(1, len(logs))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "index", "count", "per_episode"])
        for d, c in enumerate(days, 1):
            w.writerow(["day", d, int(c), repr(float(c) / n)])
        for h, c in enumerate(hours):
            w.writerow(["hour", h, int(c), repr(float(c) / n)])


def read_action_histogram(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, list[float]] = {"day": [], "hour": []}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["kind"]].append(float(row["per_episode"]))
    return {k: np.array(v) for k, v in out.items()}


EPISODE_COLUMNS = ("episode", "location", "window", "t", "gt", "observed", "profile", "forecast", "estimate", "reward")


def _f(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def write_episodes(path: Path, ev: Evaluation, test_raw: Sequence[EpisodeInstance], norm: Normalizer) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPISODE_COLUMNS)
        for i, (lg, inst) in enumerate(zip(ev.logs, test_raw)):
            T = lg.profile.values.size
            gt = inst.target[:T]
            mask = lg.profile.observed_mask
            prof = np.where(mask, gt, norm.invert(lg.profile.values))
            fc = norm.invert(lg.forecast)
            est = norm.invert(ev.estimates[i])
            rewards = dict(zip(lg.decision_times, (tr.reward for tr in lg.transitions)))
            for t in range(T):
                r = rewards.get(t)
                w.writerow([
                    i, inst.location, inst.window, t, repr(float(gt[t])), int(mask[t]),
                    repr(float(prof[t])), _f(fc[t]), repr(float(est[t])), "" if r is None else repr(r),
                ])


def write_estimates(path: Path, estimates: np.ndarray) -> None:
    """One row per test episode: id followed by the estimated profile."""
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode"] + [f"t{t}" for t in range(estimates.shape[1])])
        for i, row in enumerate(estimates):
            w.writerow([i] + [repr(float(v)) for v in row])


def plot_rows(gt, profile, estimate, observed) -> list[tuple[int, float, float, float, int]]:
    return [
        (t, float(g), float(p), float(e), int(o))
        for t, (g, p, e, o) in enumerate(zip(gt, profile, estimate, observed))
    ]


def emit_plot_data(
    episode_log: EpisodeLog,
    ground_truth: Sequence[float],
    estimate: Sequence[float] | None = None,
    normalizer: Normalizer | None = None,
    path: str | Path | None = None,
) -> list[tuple]:
    """Overlay rows ``(t, gt, profile, estimate, observed_flag)``.

    ``ground_truth`` is used as given; profile and estimate are mapped back
    through ``normalizer`` when one is supplied.  Without an estimate the
    profile is repeated in its place.
    """
    prof = episode_log.profile.values
    est = prof if estimate is None else np.asarray(estimate, dtype=np.float64)
    if normalizer is not None:
        prof, est = normalizer.invert(prof), normalizer.invert(est)
    rows = plot_rows(ground_truth, prof, est, episode_log.profile.observed_mask)
    if path is not None:
        write_plot_csv(path, rows)
    return rows


def write_plot_csv(path: str | Path, rows: Sequence[tuple]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "gt", "profile", "estimate", "observed_flag"])
        for t, g, p, e, o in rows:
            w.writerow([t, repr(g), repr(p), repr(e), o])


def plot_episode(run_dir: str | Path, episode: int, out: str | Path | None = None) -> Path:
    """Extract one test episode from a run's ``episodes.csv`` as plot data."""
    run_dir = Path(run_dir)
    src = run_dir / "episodes.csv"
    if not src.is_file():
        raise UsageError(f"run {run_dir} has no episodes.csv")
    gt, prof, est, obs = [], [], [], []
    with src.open(newline="") as fh:
        for row in csv.DictReader(fh):
            if int(row["episode"]) == episode:
                gt.append(float(row["gt"]))
                prof.append(float(row["profile"]))
                est.append(float(row["estimate"]))
                obs.append(int(row["observed"]))
    if not gt:
        raise UsageError(f"run {run_dir} has no episode {episode}")
    dest = Path(out) if out is not None else run_dir / f"plot_episode_{episode}.csv"
    write_plot_csv(dest, plot_rows(gt, prof, est, obs))
    return dest


# -- run / compare -------------------------------------------------------------


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None, workspace: Workspace | None = None) -> RunResult:
    cfg.validate()
    if not Path(cfg.data).is_file():
        raise UsageError(f"data file not found: {cfg.data}")
    ws = workspace if workspace is not None else Workspace()
    out = Path(out_dir if out_dir is not None else cfg.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    log.info("run %s -> %s", cfg.label, out)

    data = prepare_data(cfg, ws)
    forecaster = build_forecaster(cfg, data, ws)
    policy = build_policy(cfg, data, forecaster, ws)
    estimator = build_estimator(cfg, data, forecaster, policy, ws)

    for name, comp in (("predictor", forecaster), ("drqn", policy), ("estimator", estimator)):
        if comp is not None and comp.params is not None:
            save_params(out / "checkpoints" / f"{name}.npz", comp.params, {**comp.meta, "config": cfg.label})
            _write_records(out / f"{name}_log.csv", comp.history)

    ev = evaluate_configuration(
        data.test, data.test_raw, forecaster.obj, policy.obj, estimator.obj if estimator else None,
        data.normalizer, episode_config(cfg), _stream(cfg, _EVAL_STREAM),
    )
    write_metrics_csv(out / "metrics.csv", [(cfg.label, ev.report)])
    write_episodes(out / "episodes.csv", ev, data.test_raw, data.normalizer)
    write_estimates(out / "estimates.csv", data.normalizer.invert(ev.estimates))
    write_action_histogram(
        out / "action_histogram.csv", ev.logs, [e.hour_of_day_offset for e in data.test_raw], cfg.horizon
    )
    log.info("%s: %s", cfg.label, ev.report.to_record())
    return RunResult(cfg, out, ev)


@dataclass
class Comparison:
    labels: list[str]
    values: np.ndarray  # (n_runs, 4) in METRIC_COLUMNS order
    reference: int

    @property
    def deltas(self) -> np.ndarray:
        """Relative change of every run against the reference, in percent."""
        ref = self.values[self.reference]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(ref == 0, np.where(self.values == 0, 0.0, np.nan), (self.values - ref) / ref * 100.0)

    def render(self) -> str:
        metrics = METRIC_COLUMNS[1:]
        cells = [["metric"] + [lab + (" (ref)" if j == self.reference else "") for j, lab in enumerate(self.labels)]]
        d = self.deltas
        for k, m in enumerate(metrics):
            row = [m]
            for j in range(len(self.labels)):
                v = f"{self.values[j, k]:.6g}"
                if j != self.reference:
                    v += " (n/a)" if np.isnan(d[j, k]) else f" ({d[j, k]:+.2f}%)"
                row.append(v)
            cells.append(row)
        widths = [max(len(r[c]) for r in cells) for c in range(len(cells[0]))]
        return "\n".join("  ".join(s.ljust(w) for s, w in zip(r, widths)).rstrip() for r in cells) + "\n"


def compare(run_dirs: Sequence[str | Path]) -> Comparison:
    """Side-by-side metrics; the first directory given is the reference.

    Columns are ordered by config label (ties keep argument order).
    """
    if len(run_dirs) < 2:
        raise UsageError("compare needs at least two run directories")
    entries = []
    for pos, d in enumerate(run_dirs):
        p = Path(d) / "metrics.csv"
        if not p.is_file():
            raise UsageError(f"run {d}: missing metrics.csv")
        rows = read_metrics_csv(p)
        if not rows:
            raise UsageError(f"run {d}: metrics.csv is empty")
        label, rep = rows[0]
        entries.append((label, pos, rep))
    entries.sort(key=lambda e: (e[0], e[1]))
    labels = [e[0] for e in entries]
    counts = {lab: labels.count(lab) for lab in labels}
    labels = [f"{e[0]}[{Path(run_dirs[e[1]]).name}]" if counts[e[0]] > 1 else e[0] for e in entries]
    values = np.array([[e[2].rmse, e[2].mae, e[2].mape_pct, e[2].coverage] for e in entries])
    ref = next(j for j, e in enumerate(entries) if e[1] == 0)
    return Comparison(labels, values, ref)


def run_from_file(path: str | Path, overrides: dict[str, str] | None = None, preset: str | None = None, **kw) -> RunResult:
    return run(config_mod.load(path, overrides, preset), **kw)
