"""Observation scheduling: DRQN agent, reward, replay memory, baseline policies.

An action ``a`` in ``1..K`` is the number of hours until the next
observation.  The Q-network is three ReLU dense layers, one LSTM layer and a
linear head with one output per action; it reads a left-padded sequence of
the most recent agent states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import HISTORY_LEN, TARGET_LEN
from .errors import DimensionError, NumericalError
from .metrics import dtw_distance
from .nn import (
    AdamState,
    LstmStack,
    Params,
    adam_update,
    backward_sequence,
    clip_grad_norm,
    copy_params,
    dense_backward,
    dense_forward,
    forward_sequence,
    init_dense,
    init_lstm,
    sub,
)
from .nn.layers import _GradView
from .predictor import hour_features

STATE_DIM = 1 + 12 + 1 + 2 + 1 + HISTORY_LEN


@dataclass(frozen=True)
class AgentState:
    vector: np.ndarray
    forecast_mask: np.ndarray
    t: int
    o_ava: int
    terminal: bool = False


def build_state(
    obs: float,
    forecast: Sequence[float],
    t_local: int,
    t_global: int,
    o_ava: int,
    x_h: Sequence[float],
    K: int = 12,
    horizon: int = TARGET_LEN,
    budget: int = 28,
    terminal: bool = False,
) -> AgentState:
    """Flatten ``[x_t, forecast(K), t/T, sin, cos, o_ava/O, history(48)]``."""
    f = np.asarray(forecast, dtype=np.float64).ravel()
    xh = np.asarray(x_h, dtype=np.float64).ravel()
    if f.size > K:
        raise DimensionError(f"forecast has {f.size} values, K={K}")
    if xh.size != HISTORY_LEN:
        raise DimensionError(f"history must have {HISTORY_LEN} values, got {xh.size}")
    fc = np.zeros(K)
    fc[: f.size] = f
    mask = np.zeros(K, bool)
    mask[: f.size] = True
    vec = np.concatenate(
        [[obs], fc, [t_local / horizon], hour_features(t_global), [o_ava / budget], xh]
    )
    return AgentState(vec, mask, int(t_local), int(o_ava), terminal)


@dataclass(frozen=True)
class Transition:
    state: AgentState
    action: int
    reward: float
    next_state: AgentState
    done: bool


def compute_reward(forecast_used, gt_segment, w1: float = 1.0, w2: float = 10.0, waste: int = 0) -> float:
    """``-(mean |f - x|) - w1 * DTW(f, x) - w2 * waste``; empty segments score 0."""
    f = np.asarray(forecast_used, dtype=np.float64).ravel()
    g = np.asarray(gt_segment, dtype=np.float64).ravel()
    if f.shape != g.shape:
        raise DimensionError(f"segment length mismatch: {f.size} vs {g.size}")
    if waste < 0:
        raise ValueError("waste must be >= 0")
    r = -w2 * waste
    if f.size:
        r -= float(np.mean(np.abs(f - g))) + w1 * dtw_distance(f, g)
    return float(r)


def uniform_policy(t_local: int, interval: int = 6, horizon: int = TARGET_LEN) -> int:
    return int(min(interval, horizon - t_local))


def epsilon_at(episode: int, n_episodes: int, start: float = 1.0, end: float = 0.1, decay_frac: float = 0.6) -> float:
    horizon = max(1, int(round(decay_frac * n_episodes)))
    if episode >= horizon:
        return end
    return start + (end - start) * episode / horizon


# -- replay memory -------------------------------------------------------------


@dataclass
class SequenceBatch:
    states: np.ndarray  # (L, B, D)
    actions: np.ndarray  # (L, B), 1-based
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    mask: np.ndarray  # (L, B) 1 for real steps, 0 for left padding
    episode_ids: np.ndarray  # (L, B), -1 on padding


class ReplayBuffer:
    """FIFO ring of transitions stored in episode order."""

    def __init__(self, capacity: int = 5000, state_dim: int = STATE_DIM):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, bool)
        self.episode = np.full(capacity, -1, np.int64)
        self.total = 0  # transitions ever inserted

    def __len__(self) -> int:
        return min(self.total, self.capacity)

    @property
    def oldest(self) -> int:
        return max(0, self.total - self.capacity)

    def push(self, tr: Transition, episode_id: int) -> None:
        i = self.total % self.capacity
        self.states[i] = tr.state.vector
        self.next_states[i] = tr.next_state.vector
        self.actions[i] = tr.action
        self.rewards[i] = tr.reward
        self.dones[i] = tr.done
        self.episode[i] = episode_id
        self.total += 1

    def push_episode(self, transitions: Sequence[Transition], episode_id: int) -> None:
        for tr in transitions:
            self.push(tr, episode_id)

    def sample(self, batch: int, length: int, rng: np.random.Generator) -> SequenceBatch:
        """Sequences of up to ``length`` consecutive transitions of one episode.

        Each sequence ends at a uniformly drawn stored transition; shorter
        sequences (near an episode start or the eviction front) are padded
        on the left.
        """
        D = self.states.shape[1]
        out = SequenceBatch(
            np.zeros((length, batch, D)),
            np.ones((length, batch), np.int64),
            np.zeros((length, batch)),
            np.zeros((length, batch, D)),
            np.zeros((length, batch), bool),
            np.zeros((length, batch)),
            np.full((length, batch), -1, np.int64),
        )
        ends = rng.integers(self.oldest, self.total, size=batch)
        for b, end in enumerate(ends):
            ep = self.episode[end % self.capacity]
            start = end
            while start - 1 >= self.oldest and end - start + 1 < length and self.episode[(start - 1) % self.capacity] == ep:
                start -= 1
            idx = np.arange(start, end + 1) % self.capacity
            rows = slice(length - len(idx), length)
            out.states[rows, b] = self.states[idx]
            out.next_states[rows, b] = self.next_states[idx]
            out.actions[rows, b] = self.actions[idx]
            out.rewards[rows, b] = self.rewards[idx]
            out.dones[rows, b] = self.dones[idx]
            out.mask[rows, b] = 1.0
            out.episode_ids[rows, b] = self.episode[idx]
        return out


# -- Q network -----------------------------------------------------------------

_STACK = LstmStack(("lstm",))


@dataclass
class DrqnParams:
    theta: Params
    target: Params
    n_actions: int = 12


def init_drqn(
    state_dim: int = STATE_DIM,
    dense: Sequence[int] = (128, 128, 64),
    hidden: int = 64,
    n_actions: int = 12,
    rng: np.random.Generator | None = None,
) -> DrqnParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    p: Params = {}
    widths = [state_dim, *dense]
    for i in range(len(dense)):
        init_dense(p, f"fc{i}", widths[i], widths[i + 1], rng)
    init_lstm(p, "lstm", widths[-1], hidden, rng)
    init_dense(p, "out", hidden, n_actions, rng)
    return DrqnParams(p, copy_params(p), n_actions)


def _n_dense(params: Params) -> int:
    return sum(1 for k in params if k.startswith("fc") and k.endswith(".W"))


def q_forward(params: Params, seq: np.ndarray, mask: np.ndarray | None = None):
    """Q-values (T, B, A) for a (T, B, D) state sequence."""
    x = seq
    caches = []
    for i in range(_n_dense(params)):
        x, c = dense_forward(sub(params, f"fc{i}"), x, "relu")
        caches.append(c)
    q, _, seq_cache = forward_sequence(params, _STACK, "out", x, mask=mask)
    return q, (caches, seq_cache)


def q_backward(params: Params, cache, dq: np.ndarray) -> Params:
    dense_caches, seq_cache = cache
    grads, dx, _ = backward_sequence(params, seq_cache, dq)
    for i in range(len(dense_caches) - 1, -1, -1):
        dx = dense_backward(sub(params, f"fc{i}"), dense_caches[i], dx, _GradView(grads, f"fc{i}"))
    return grads


def _pad_histories(histories: Sequence[Sequence[AgentState]]):
    L = max(len(h) for h in histories)
    D = histories[0][0].vector.size
    seq = np.zeros((L, len(histories), D))
    mask = np.zeros((L, len(histories)))
    for b, h in enumerate(histories):
        seq[L - len(h) :, b] = [s.vector for s in h]
        mask[L - len(h) :, b] = 1.0
    return seq, mask


def greedy_actions(params: Params, histories: Sequence[Sequence[AgentState]]) -> np.ndarray:
    seq, mask = _pad_histories(histories)
    q, _ = q_forward(params, seq, mask)
    return np.argmax(q[-1], axis=1) + 1  # argmax picks the smallest a on ties


def select_actions(
    dp: DrqnParams,
    histories: Sequence[Sequence[AgentState]],
    epsilon: float | Sequence[float],
    rng: np.random.Generator,
    max_len: int = 12,
) -> np.ndarray:
    """Epsilon-greedy over the evaluation network, one action per history.

    ``epsilon`` is a scalar or one value per history; random draws are made
    in history order so results depend only on the generator state.
    """
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (len(histories),))
    acts = np.zeros(len(histories), np.int64)
    greedy = []
    for b in range(len(histories)):
        if eps[b] > 0 and rng.random() < eps[b]:
            acts[b] = rng.integers(1, dp.n_actions + 1)
        else:
            greedy.append(b)
    if greedy:
        acts[greedy] = greedy_actions(dp.theta, [list(histories[b])[-max_len:] for b in greedy])
    return acts


def select_action(dp: DrqnParams, recent_states: Sequence[AgentState], epsilon: float, rng, max_len: int = 12) -> int:
    if not recent_states:
        raise ValueError("need at least one state")
    return int(select_actions(dp, [recent_states], epsilon, rng, max_len)[0])


def td_target(batch: SequenceBatch, target: Params, gamma: float) -> np.ndarray:
    qn, _ = q_forward(target, batch.next_states, batch.mask)
    return batch.rewards + gamma * (~batch.dones) * qn.max(axis=2)


def td_loss(params: Params, batch: SequenceBatch, y: np.ndarray, grad: bool = True):
    q, cache = q_forward(params, batch.states, batch.mask)
    L, B = batch.actions.shape
    a = batch.actions - 1
    chosen = np.take_along_axis(q, a[:, :, None], axis=2)[:, :, 0]
    n = max(batch.mask.sum(), 1.0)
    td = (chosen - y) * batch.mask
    loss = float(np.sum(td * td) / n)
    if not grad:
        return loss, None
    dq = np.zeros_like(q)
    np.put_along_axis(dq, a[:, :, None], (2.0 * td / n)[:, :, None], axis=2)
    return loss, q_backward(params, cache, dq)


def train_step(dp: DrqnParams, batch: SequenceBatch, opt: AdamState, gamma: float = 0.99, clip: float = 5.0) -> float:
    """One Adam step on the masked mean squared TD error."""
    y = td_target(batch, dp.target, gamma)
    loss, grads = td_loss(dp.theta, batch, y)
    if not np.isfinite(loss):
        raise NumericalError("DRQN loss is not finite")
    clip_grad_norm(grads, clip)
    adam_update(opt, dp.theta, grads)
    return loss


def sync_target(dp: DrqnParams) -> DrqnParams:
    dp.target = copy_params(dp.theta)
    return dp


# -- policies used by the episode engine ---------------------------------------
# act(histories, rng, envs) -> actions; ``envs`` indexes the episode batch.


@dataclass
class UniformPolicy:
    interval: int = 6

    def act(self, histories, rng, envs=None) -> np.ndarray:
        return np.array([uniform_policy(h[-1].t, self.interval) for h in histories], np.int64)


@dataclass
class FixedPolicy:
    action: int

    def act(self, histories, rng, envs=None) -> np.ndarray:
        return np.full(len(histories), self.action, np.int64)


@dataclass
class RandomPolicy:
    n_actions: int = 12

    def act(self, histories, rng, envs=None) -> np.ndarray:
        return rng.integers(1, self.n_actions + 1, size=len(histories))


@dataclass
class DrqnPolicy:
    """Epsilon-greedy DRQN; ``epsilon`` is a scalar or one value per episode."""

    dp: DrqnParams
    epsilon: float | Sequence[float] = 0.0
    max_len: int = 12

    def act(self, histories, rng, envs=None) -> np.ndarray:
        eps = self.epsilon
        if np.ndim(eps) and envs is not None:
            eps = np.asarray(eps)[np.asarray(envs)]
        return select_actions(self.dp, histories, eps, rng, self.max_len)
