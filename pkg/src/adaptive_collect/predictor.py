"""Forecasting future occupancy from the 48-hour history.

Two forecasters share one rollout protocol used by the episode engine:

* an encoder-decoder LSTM: the encoder reads the history, the decoder runs
  hour by hour over the 168-hour horizon taking the previous value (an
  actual observation when one exists, its own clamped output otherwise)
  plus an hour-of-day encoding;
* an AR(4) model fit on the history and tracked by a Kalman filter.

Decoder state ``S_j`` is the state after step ``j`` has consumed its input;
its head output is the forecast for index ``j``.  ``rollout(S_t, v_t, n)``
feeds the value at ``t`` and returns forecasts and states for
``t+1 .. t+n``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from .data import HISTORY_LEN, TARGET_LEN, EpisodeInstance
from .errors import DimensionError, NumericalError, UsageError
from .nn import (
    AdamState,
    LstmStack,
    Params,
    adam_update,
    backward_sequence,
    check_finite,
    clip_grad_norm,
    copy_params,
    dense_forward,
    forward_sequence,
    init_dense,
    init_lstm,
    sub,
)
from .nn.layers import SequenceCache

log = logging.getLogger(__name__)

CLAMP_LO, CLAMP_HI = -0.5, 1.5


def hour_features(hours) -> np.ndarray:
    a = 2.0 * np.pi * (np.asarray(hours, dtype=np.float64) % 24) / 24.0
    return np.stack([np.sin(a), np.cos(a)], axis=-1)


# -- encoder-decoder LSTM ----------------------------------------------------


@dataclass
class PredictorParams:
    params: Params
    hidden: int
    n_layers: int = 2
    trained: bool = False

    @property
    def encoder(self) -> LstmStack:
        return LstmStack(tuple(f"enc{i}" for i in range(self.n_layers)))

    @property
    def decoder(self) -> LstmStack:
        return LstmStack(tuple(f"dec{i}" for i in range(self.n_layers)))


def init_predictor(hidden: int = 128, n_layers: int = 2, rng=None) -> PredictorParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    p: Params = {}
    for name in ("enc", "dec"):
        for i in range(n_layers):
            init_lstm(p, f"{name}{i}", 3 if i == 0 else hidden, hidden, rng)
    init_dense(p, "head", hidden, 1, rng)
    return PredictorParams(p, hidden, n_layers)


def _encoder_inputs(histories: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    hours = offsets[None, :] - HISTORY_LEN + np.arange(HISTORY_LEN)[:, None]
    return np.concatenate([histories.T[:, :, None], hour_features(hours)], axis=2)


def encode(pp: PredictorParams, histories: np.ndarray, offsets: np.ndarray):
    xs = _encoder_inputs(np.atleast_2d(histories), np.asarray(offsets))
    _, state, cache = forward_sequence(pp.params, pp.encoder, None, xs)
    return state, cache


def _decoder_step(pp: PredictorParams, values, hours, state):
    x = np.concatenate([np.asarray(values)[:, None], hour_features(hours)], axis=1)
    top, state, sc = pp.decoder.step(pp.params, x, state)
    y, hc = dense_forward(sub(pp.params, "head"), top)
    return y[:, 0], state, (sc, hc)


def sequence_loss(
    pp: PredictorParams,
    histories: np.ndarray,
    targets: np.ndarray,
    offsets: np.ndarray,
    p_tf: float = 1.0,
    rng: np.random.Generator | None = None,
    grad: bool = True,
):
    """Mean squared error of the 168-step decode, with teacher forcing.

    At every step the next decoder input is the ground truth with
    probability ``p_tf`` and the (clamped, non-differentiated) model output
    otherwise.  Returns ``(loss, grads or None)``.
    """
    B, T = targets.shape
    offsets = np.asarray(offsets)
    use_truth = np.ones((T, B), bool) if p_tf >= 1.0 else (rng.random((T, B)) < p_tf)
    state, enc_cache = encode(pp, histories, offsets)
    dec_cache = SequenceCache(pp.decoder, "head", state0=state)
    prev = histories[:, -1].copy()
    ys = np.empty((T, B))
    for j in range(T):
        y, state, (sc, hc) = _decoder_step(pp, prev, offsets + j, state)
        dec_cache.steps.append((sc, hc))
        ys[j] = y
        prev = np.where(use_truth[j], targets[:, j], np.clip(y, CLAMP_LO, CLAMP_HI))
    err = ys - targets.T
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise NumericalError("predictor loss is not finite")
    if not grad:
        return loss, None
    douts = (2.0 / err.size) * err[:, :, None]
    grads, _, dstate0 = backward_sequence(pp.params, dec_cache, douts)
    enc_douts = np.zeros((len(enc_cache.steps), B, pp.hidden))
    backward_sequence(pp.params, enc_cache, enc_douts, grads, dfinal=dstate0)
    return loss, grads


@dataclass
class PredictorConfig:
    hidden: int = 128
    n_layers: int = 2
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    clip: float = 5.0
    seed: int = 0


def train_predictor(
    train: Sequence[EpisodeInstance],
    config: PredictorConfig,
    val: Sequence[EpisodeInstance] = (),
    rng: np.random.Generator | None = None,
) -> tuple[PredictorParams, list[dict]]:
    """Fit the encoder-decoder on normalized episodes.

    Teacher-forcing probability falls linearly from 1 to 0 across epochs.
    When validation episodes are given, the parameters with the lowest
    free-running validation loss are kept.
    """
    if len(train) == 0:
        raise UsageError("train_predictor needs at least one episode")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    pp = init_predictor(config.hidden, config.n_layers, rng)
    opt = AdamState(lr=config.lr)
    H = np.stack([e.history for e in train])
    Y = np.stack([e.target for e in train])
    O = np.array([e.hour_of_day_offset for e in train])
    history: list[dict] = []
    best, best_loss = None, np.inf
    for epoch in range(config.epochs):
        p_tf = 1.0 - epoch / max(1, config.epochs - 1)
        order = rng.permutation(len(train))
        losses = []
        for s in range(0, len(order), config.batch_size):
            b = order[s : s + config.batch_size]
            loss, grads = sequence_loss(pp, H[b], Y[b], O[b], p_tf, rng)
            clip_grad_norm(grads, config.clip)
            adam_update(opt, pp.params, grads)
            check_finite(pp.params)
            losses.append(loss)
        rec = {"epoch": epoch, "p_tf": p_tf, "train_loss": float(np.mean(losses))}
        if len(val):
            rec["val_loss"] = evaluate_loss(pp, val)
            if rec["val_loss"] < best_loss:
                best, best_loss = copy_params(pp.params), rec["val_loss"]
        log.info("predictor %s", rec)
        history.append(rec)
    if best is not None:
        pp.params = best
    pp.trained = True
    return pp, history


def evaluate_loss(pp: PredictorParams, episodes: Sequence[EpisodeInstance], batch: int = 256) -> float:
    """Free-running (no teacher forcing) mean squared error."""
    total, n = 0.0, 0
    for s in range(0, len(episodes), batch):
        chunk = episodes[s : s + batch]
        loss, _ = sequence_loss(
            pp,
            np.stack([e.history for e in chunk]),
            np.stack([e.target for e in chunk]),
            np.array([e.hour_of_day_offset for e in chunk]),
            p_tf=0.0,
            rng=np.random.default_rng(0),
            grad=False,
        )
        total += loss * len(chunk)
        n += len(chunk)
    return total / n


def predict_horizon(
    pp: PredictorParams,
    history: Sequence[float],
    observations: Sequence[tuple[int, float]],
    t: int,
    K: int,
    hour_offset: int = 0,
    horizon: int = TARGET_LEN,
) -> np.ndarray:
    """Forecast indices ``t+1 .. t+n`` with ``n = min(K, horizon - t)``.

    The decoder is rolled from index 0 through ``t``, fed the observed value
    wherever one exists and its own clamped output elsewhere.
    """
    if not pp.trained:
        raise UsageError("predictor parameters are untrained")
    obs = dict(observations)
    hist = np.asarray(history, dtype=np.float64)[None, :]
    off = np.array([hour_offset])
    state, _ = encode(pp, hist, off)
    prev = hist[0, -1]
    y = None
    for j in range(t + 1):
        if j > 0:
            prev = obs.get(j - 1, y)
        y, state, _ = _decoder_step(pp, np.array([prev]), off + j, state)
        y = float(np.clip(y[0], CLAMP_LO, CLAMP_HI))
    prev = obs.get(t, y)
    out = []
    for j in range(t + 1, t + 1 + max(0, min(K, horizon - t))):
        y, state, _ = _decoder_step(pp, np.array([prev]), off + j, state)
        prev = float(np.clip(y[0], CLAMP_LO, CLAMP_HI))
        out.append(prev)
    return np.array(out)


# -- AR(4) + Kalman ------------------------------------------------------------

AR_ORDER = 4


@dataclass
class ArKalmanModel:
    phi: np.ndarray
    mean: float
    q: float
    r: float
    x: np.ndarray  # deviations from mean, newest first
    P: np.ndarray
    fallback: bool = False

    @property
    def F(self) -> np.ndarray:
        F = np.zeros((AR_ORDER, AR_ORDER))
        F[0] = self.phi
        F[1:, :-1] = np.eye(AR_ORDER - 1)
        return F

    @property
    def level(self) -> float:
        return float(self.x[0] + self.mean)


def ar_fit(history: Sequence[float], r_fraction: float = 0.05, tiny: float = 1e-10) -> ArKalmanModel:
    """Least-squares AR(4) on the mean-removed history.

    Constant histories fall back to persistence.  Rank-deficient designs
    (e.g. ramps) use the minimum-norm least-squares solution.
    """
    h = np.asarray(history, dtype=np.float64)
    if h.size < AR_ORDER + 1:
        raise DimensionError(f"AR({AR_ORDER}) needs >= {AR_ORDER + 1} points, got {h.size}")
    mean = float(h.mean())
    y = h - mean
    x0 = y[::-1][:AR_ORDER].copy()
    if np.ptp(h) <= tiny:
        log.warning("constant history: AR fit falls back to persistence")
        phi = np.array([1.0, 0.0, 0.0, 0.0])
        return ArKalmanModel(phi, mean, tiny, tiny, x0, np.zeros((4, 4)), fallback=True)
    X = np.stack([y[AR_ORDER - k - 1 : len(y) - k - 1] for k in range(AR_ORDER)], axis=1)
    target = y[AR_ORDER:]
    phi, *_ = np.linalg.lstsq(X, target, rcond=None)
    resid = target - X @ phi
    q = max(float(np.mean(resid**2)), tiny)
    return ArKalmanModel(phi, mean, q, r_fraction * q, x0, np.zeros((4, 4)))


def _symmetrize(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(P)):
        raise NumericalError("Kalman covariance is not finite")
    return P


def time_update(m: ArKalmanModel) -> ArKalmanModel:
    F = m.F
    P = F @ m.P @ F.T
    P[0, 0] += m.q
    return replace(m, x=F @ m.x, P=_symmetrize(P))


def measurement_update(m: ArKalmanModel, z: float) -> ArKalmanModel:
    S = m.P[0, 0] + m.r
    if S <= 0.0:
        x = m.x.copy()
        x[0] = z - m.mean
        return replace(m, x=x)
    K = m.P[:, 0] / S
    x = m.x + K * (z - m.mean - m.x[0])
    P = m.P - np.outer(K, m.P[0])
    return replace(m, x=x, P=_symmetrize(P))


def kalman_step(m: ArKalmanModel, observation: float | None = None) -> tuple[ArKalmanModel, float]:
    """Advance one hour; returns the updated model and the one-step prediction."""
    prior = time_update(m)
    pred = prior.level
    if observation is not None:
        prior = measurement_update(prior, observation)
    return prior, pred


# -- rollout protocol used by the episode engine -----------------------------


class Forecaster(Protocol):
    def begin(self, instances: Sequence[EpisodeInstance]) -> list: ...

    def rollout(self, states: list, ts: np.ndarray, values: np.ndarray, n: int) -> tuple[np.ndarray, list]:
        """Returns forecasts (B, n) and per-env lists of n successor states."""
        ...


@dataclass
class LstmForecaster:
    pp: PredictorParams

    def __post_init__(self) -> None:
        if not self.pp.trained:
            raise UsageError("predictor parameters are untrained")

    def begin(self, instances):
        hist = np.stack([e.history for e in instances])
        off = np.array([e.hour_of_day_offset for e in instances])
        state, _ = encode(self.pp, hist, off)
        _, state, _ = _decoder_step(self.pp, hist[:, -1], off, state)
        return [(int(o), s) for o, s in zip(off, state)]

    def rollout(self, states, ts, values, n):
        off = np.array([s[0] for s in states])
        state = np.stack([s[1] for s in states])
        ts = np.asarray(ts)
        prev = np.asarray(values, dtype=np.float64)
        preds = np.empty((len(states), n))
        seq = []
        for k in range(n):
            y, state, _ = _decoder_step(self.pp, prev, off + ts + k + 1, state)
            prev = np.clip(y, CLAMP_LO, CLAMP_HI)
            preds[:, k] = prev
            seq.append(state)
        out = [[(int(off[b]), seq[k][b]) for k in range(n)] for b in range(len(states))]
        return preds, out


@dataclass
class ArKalmanForecaster:
    r_fraction: float = 0.05

    def begin(self, instances):
        return [time_update(ar_fit(e.history, self.r_fraction)) for e in instances]

    def rollout(self, states, ts, values, n):
        preds = np.empty((len(states), n))
        out = []
        for b, (m, z) in enumerate(zip(states, values)):
            m = measurement_update(m, float(z))
            seq = []
            for k in range(n):
                m = time_update(m)
                preds[b, k] = m.level
                seq.append(m)
            out.append(seq)
        if not np.all(np.isfinite(preds)):
            raise NumericalError("AR/Kalman forecast is not finite")
        return preds, out


class HoldForecaster:
    """No predictor: carry the last observed value forward."""

    def begin(self, instances):
        return [None] * len(instances)

    def rollout(self, states, ts, values, n):
        v = np.asarray(values, dtype=np.float64)
        return np.repeat(v[:, None], n, axis=1), [[None] * n for _ in states]


@dataclass
class OracleForecaster:
    """Returns the ground truth; for tests and upper-bound runs."""

    instances: Sequence[EpisodeInstance] = field(default_factory=list)

    def begin(self, instances):
        self.instances = list(instances)
        return list(range(len(instances)))

    def rollout(self, states, ts, values, n):
        preds = np.zeros((len(states), n))
        for b, (i, t) in enumerate(zip(states, ts)):
            seg = self.instances[i].target[t + 1 : t + 1 + n]
            preds[b, : len(seg)] = seg
        return preds, [[i] * n for i in states]
