"""Episode engine: budgeted observation over the 168-hour horizon.

Index 0 of the horizon is always observed.  At each observation time ``t``
with budget left, the forecaster rolls forward from ``t``, the policy picks
a gap ``a``, the hours strictly between ``t`` and ``t + a`` are bridged with
the forecasts, and ``t + a`` is observed.  A gap reaching the horizon end
(index 168) is clipped there and observes nothing.  Once the budget is
spent, the remaining hours are forecast from the last observation.

Rewards are in normalized units.  A transition scores the forecast segment
``t+1 .. t+a`` (only indices that exist); the terminal transition also
scores the forecast tail after the final observation and pays ``w2`` per
unused observation.

Many episodes are stepped together so forecaster and Q-network calls are
batched; each episode's trajectory does not depend on its batch-mates.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .controller import (
    AgentState,
    DrqnParams,
    DrqnPolicy,
    ReplayBuffer,
    Transition,
    build_state,
    compute_reward,
    epsilon_at,
    sync_target,
    train_step,
)
from .data import TARGET_LEN, EpisodeInstance, Normalizer
from .errors import NumericalError
from .estimator import CollectedProfile, assemble_profile
from .metrics import MetricReport, dtw_distance, evaluate
from .nn import AdamState
from .predictor import Forecaster

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = TARGET_LEN
    budget: int = 28
    window: int = 12
    w1: float = 1.0
    w2: float = 10.0
    seq_len: int = 12

    def __post_init__(self) -> None:
        if not (1 <= self.budget <= self.horizon) or self.window < 1:
            raise ValueError(f"invalid episode config {self}")


@dataclass
class EpisodeLog:
    observation_times: list[int]
    actions: list[int]
    rewards: list[float]
    forecast: np.ndarray  # latest forecast made for every index, NaN at 0
    profile: CollectedProfile
    transitions: list[Transition] = field(default_factory=list)
    unused: int = 0

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def decision_times(self) -> list[int]:
        return [tr.state.t for tr in self.transitions]


class Policy(Protocol):
    def act(self, histories: Sequence[Sequence[AgentState]], rng: np.random.Generator, envs=None) -> np.ndarray: ...


def _segment_cost(pred: np.ndarray, gt: np.ndarray, w1: float) -> float:
    if pred.size == 0:
        return 0.0
    return float(np.mean(np.abs(pred - gt))) + w1 * dtw_distance(pred, gt)


def run_episodes(
    instances: Sequence[EpisodeInstance],
    forecaster: Forecaster,
    policy: Policy,
    config: EpisodeConfig = EpisodeConfig(),
    rng: np.random.Generator | None = None,
) -> list[EpisodeLog]:
    """Run every instance to completion and return one log per instance."""
    rng = rng if rng is not None else np.random.default_rng(0)
    N, T, K, O = len(instances), config.horizon, config.window, config.budget
    if N == 0:
        return []
    gt = np.stack([e.target[:T] for e in instances])
    fstate = forecaster.begin(instances)
    t = np.zeros(N, np.int64)
    budget = np.full(N, O - 1)
    bridging = np.full((N, T), np.nan)
    forecast = np.full((N, T), np.nan)
    obs_times: list[list[int]] = [[0] for _ in range(N)]
    acts: list[list[int]] = [[] for _ in range(N)]
    rewards: list[list[float]] = [[] for _ in range(N)]
    trans: list[list[Transition]] = [[] for _ in range(N)]
    seen: list[list[AgentState]] = [[] for _ in range(N)]
    pending: list[tuple | None] = [None] * N
    active = np.ones(N, bool)
    tails: list[int] = []  # envs whose budget ran out before the last index

    def state_for(i: int, fc, terminal: bool = False) -> AgentState:
        ti = min(int(t[i]), T)
        return build_state(
            gt[i, min(ti, T - 1)], fc, ti, (instances[i].hour_of_day_offset + ti) % 24,
            int(budget[i]), instances[i].history, K, T, O, terminal,
        )

    def finish_tails() -> None:
        # forecast the rest of the horizon for episodes whose budget ran out
        if not tails:
            return
        ids = np.array(tails)
        n = int(max(T - 1 - t[ids]))
        tp, _ = forecaster.rollout([fstate[i] for i in ids], t[ids], gt[ids, t[ids]], n)
        if not np.all(np.isfinite(tp)):
            raise NumericalError("forecaster emitted non-finite tail values")
        for b, i in enumerate(ids):
            ti = int(t[i])
            m = T - 1 - ti
            bridging[i, ti + 1 :] = tp[b, :m]
            forecast[i, ti + 1 :] = tp[b, :m]
            if pending[i] is not None:
                ps, pa, pr = pending[i]
                pending[i] = (ps, pa, pr - _segment_cost(tp[b, :m], gt[i, ti + 1 :], config.w1))
        tails.clear()

    if O == 1:
        tails.extend(range(N))
        active[:] = False
        finish_tails()

    while active.any():
        idx = np.flatnonzero(active)
        preds, succ = forecaster.rollout([fstate[i] for i in idx], t[idx], gt[idx, t[idx]], K)
        if not np.all(np.isfinite(preds)):
            raise NumericalError(f"forecaster emitted non-finite values for episodes {idx.tolist()}")
        for b, i in enumerate(idx):
            s = state_for(i, preds[b, : min(K, T - t[i])])
            if pending[i] is not None:
                ps, pa, pr = pending[i]
                trans[i].append(Transition(ps, pa, pr, s, False))
                pending[i] = None
            seen[i].append(s)
        chosen = np.asarray(policy.act([seen[i][-config.seq_len :] for i in idx], rng, idx))
        for b, i in enumerate(idx):
            a = int(np.clip(chosen[b], 1, K))
            ti = int(t[i])
            land = min(ti + a, T)
            bridging[i, ti + 1 : land] = preds[b, : land - ti - 1]
            forecast[i, ti + 1 : min(land + 1, T)] = preds[b, : min(land + 1, T) - ti - 1]
            seg_end = min(land, T - 1)
            seg = preds[b, : seg_end - ti]
            r = compute_reward(seg, gt[i, ti + 1 : seg_end + 1], config.w1, config.w2, 0)
            if land <= T - 1:
                obs_times[i].append(land)
                budget[i] -= 1
                fstate[i] = succ[b][land - ti - 1]
            t[i] = land
            acts[i].append(int(chosen[b]))
            s = seen[i][-1]
            if land >= T - 1 or budget[i] == 0:
                active[i] = False
                if land < T - 1:
                    tails.append(i)
                pending[i] = (s, int(chosen[b]), r)
            else:
                pending[i] = (s, int(chosen[b]), r)
                rewards[i].append(r)

        finish_tails()

        for i in np.flatnonzero(~active):
            if pending[i] is None:
                continue
            ps, pa, pr = pending[i]
            pr -= config.w2 * int(budget[i])
            trans[i].append(Transition(ps, pa, pr, state_for(i, [], terminal=True), True))
            rewards[i].append(pr)
            pending[i] = None

    logs = []
    for i, inst in enumerate(instances):
        profile = assemble_profile(
            [(ot, gt[i, ot]) for ot in obs_times[i]], bridging[i], inst.history, inst.hour_of_day_offset, T
        )
        logs.append(
            EpisodeLog(obs_times[i], acts[i], rewards[i], forecast[i], profile, trans[i], int(budget[i]))
        )
    return logs


def run_episode(
    instance: EpisodeInstance,
    forecaster: Forecaster,
    policy: Policy,
    config: EpisodeConfig = EpisodeConfig(),
    rng: np.random.Generator | None = None,
) -> EpisodeLog:
    return run_episodes([instance], forecaster, policy, config, rng)[0]


# -- DRQN training -------------------------------------------------------------


@dataclass
class TrainConfig:
    episodes: int = 2000
    envs_per_round: int = 8
    batch_size: int = 32
    lr: float = 1e-4
    gamma: float = 0.99
    sync_every: int = 200
    buffer_size: int = 5000
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_frac: float = 0.6
    clip: float = 5.0
    train_per_decision: float = 1.0


def run_training(
    dp: DrqnParams,
    forecaster: Forecaster,
    train: Sequence[EpisodeInstance],
    config: EpisodeConfig,
    tc: TrainConfig,
    rng: np.random.Generator,
    log_path: str | Path | None = None,
) -> tuple[DrqnParams, list[dict]]:
    """Train the DRQN against a frozen forecaster.

    Episodes run in rounds of ``envs_per_round`` against a snapshot of the
    evaluation network; after each round the transitions enter the replay
    buffer and one train step is taken per decision made in the round.
    """
    buf = ReplayBuffer(tc.buffer_size, dp.theta["fc0.W"].shape[0])
    opt = AdamState(lr=tc.lr)
    steps = 0
    records: list[dict] = []
    if len(train) == 0 or tc.episodes <= 0:
        return dp, records
    writer = None
    fh = None
    if log_path is not None:
        fh = Path(log_path).open("w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "return", "loss", "epsilon"])
    try:
        for start in range(0, tc.episodes, tc.envs_per_round):
            ep_ids = np.arange(start, min(start + tc.envs_per_round, tc.episodes))
            picks = rng.integers(0, len(train), size=ep_ids.size)
            eps = np.array([epsilon_at(e, tc.episodes, tc.eps_start, tc.eps_end, tc.eps_decay_frac) for e in ep_ids])
            logs = run_episodes([train[k] for k in picks], forecaster, DrqnPolicy(dp, eps, config.seq_len), config, rng)
            n_decisions = 0
            for e, lg in zip(ep_ids, logs):
                buf.push_episode(lg.transitions, int(e))
                n_decisions += len(lg.transitions)
            losses = []
            if len(buf) >= tc.batch_size:
                for _ in range(int(round(n_decisions * tc.train_per_decision))):
                    batch = buf.sample(tc.batch_size, config.seq_len, rng)
                    losses.append(train_step(dp, batch, opt, tc.gamma, tc.clip))
                    steps += 1
                    if steps % tc.sync_every == 0:
                        sync_target(dp)
            loss = float(np.mean(losses)) if losses else float("nan")
            for e, lg, ep in zip(ep_ids, logs, eps):
                rec = {"episode": int(e), "return": lg.total_return, "loss": loss, "epsilon": float(ep)}
                records.append(rec)
                if writer:
                    writer.writerow([rec["episode"], repr(rec["return"]), repr(loss), repr(rec["epsilon"])])
            if start % (tc.envs_per_round * 25) == 0:
                log.info("drqn episode %d return %.3f loss %.4f eps %.2f", start, np.mean([lg.total_return for lg in logs]), loss, eps[0])
    finally:
        if fh:
            fh.close()
    return dp, records


# -- evaluation ----------------------------------------------------------------


class Estimator(Protocol):
    def estimate(self, profiles: Sequence[CollectedProfile]) -> np.ndarray: ...


@dataclass
class Evaluation:
    report: MetricReport
    logs: list[EpisodeLog]
    estimates: np.ndarray  # normalized, (N, T)


def evaluate_configuration(
    test: Sequence[EpisodeInstance],
    raw_test: Sequence[EpisodeInstance],
    forecaster: Forecaster,
    policy: Policy,
    estimator: Estimator | None,
    normalizer: Normalizer,
    config: EpisodeConfig = EpisodeConfig(),
    rng: np.random.Generator | None = None,
) -> Evaluation:
    """Run every test episode; metrics are computed in the original data scale.

    ``test`` holds normalized instances and ``raw_test`` the same episodes
    unnormalized (for exact ground truth and coverage).
    """
    logs = run_episodes(test, forecaster, policy, config, rng if rng is not None else np.random.default_rng(0))
    profiles = [lg.profile for lg in logs]
    est = estimator.estimate(profiles) if estimator is not None else np.stack([p.values for p in profiles])
    raw_est = normalizer.invert(est)
    truths = [e.target[: config.horizon] for e in raw_test]
    observed = [e.target[lg.observation_times] for e, lg in zip(raw_test, logs)]
    return Evaluation(evaluate(list(raw_est), truths, observed), logs, est)


def write_episode_csv(path: str | Path, lg: EpisodeLog) -> None:
    """One row per hour: t, observed flag, profile value, forecast, reward at decision hours."""
    decision_reward = dict(zip(lg.decision_times, (tr.reward for tr in lg.transitions)))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "observed", "value", "forecast", "reward"])
        for ti, (v, o, f) in enumerate(zip(lg.profile.values, lg.profile.observed_mask, lg.forecast)):
            r = decision_reward.get(ti)
            w.writerow([ti, int(o), repr(float(v)), "" if np.isnan(f) else repr(float(f)), "" if r is None else repr(r)])
