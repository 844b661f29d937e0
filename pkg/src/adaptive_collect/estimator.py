"""Post-hoc reconstruction of the 168-hour profile.

The learned estimator is an encoder-decoder LSTM.  The encoder reads the
216-step concatenation of history and collected profile forward.  The
decoder starts from the encoder's final state and walks the 168 profile
steps backward, reading each step's features together with the encoder's
output at that step, so every hour sees both the observations before it and
those after it.  Its head emits a correction added to the profile value.
Each step carries ``[value, observed flag, sin hour, cos hour]``; the flag
can be switched off.

The GPR baseline ignores predictions and interpolates observations with a
squared-exponential kernel of fixed hyperparameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .data import HISTORY_LEN, TARGET_LEN
from .errors import AssemblyError, DimensionError, NumericalError, UsageError
from .nn import (
    AdamState,
    LstmStack,
    Params,
    adam_update,
    backward_sequence,
    check_finite,
    clip_grad_norm,
    copy_params,
    forward_sequence,
    init_dense,
    init_lstm,
)
from .predictor import hour_features

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CollectedProfile:
    values: np.ndarray
    observed_mask: np.ndarray
    history: np.ndarray
    hour_of_day_offset: int = 0

    @property
    def observation_times(self) -> np.ndarray:
        return np.flatnonzero(self.observed_mask)


def assemble_profile(
    observations: Sequence[tuple[int, float]],
    bridging: Mapping[int, float] | Sequence[float] | np.ndarray,
    history: Sequence[float],
    hour_of_day_offset: int = 0,
    horizon: int = TARGET_LEN,
) -> CollectedProfile:
    """Interleave observations with bridging forecasts.

    ``bridging`` is either a mapping ``index -> value`` or a length-``horizon``
    array with NaN where nothing was predicted.  Observed indices always take
    the observation.
    """
    values = np.full(horizon, np.nan)
    if isinstance(bridging, Mapping):
        for i, v in bridging.items():
            values[int(i)] = v
    else:
        b = np.asarray(bridging, dtype=np.float64)
        if b.size != horizon:
            raise DimensionError(f"bridging array needs {horizon} entries, got {b.size}")
        values[:] = b
    mask = np.zeros(horizon, bool)
    last = -1
    for t, v in observations:
        t = int(t)
        if not (0 <= t < horizon) or t <= last:
            raise AssemblyError(f"observation times must be increasing within [0, {horizon}); got {t}")
        values[t] = v
        mask[t] = True
        last = t
    missing = np.flatnonzero(~np.isfinite(values))
    if missing.size:
        raise AssemblyError(f"indices neither observed nor predicted: {missing[:10].tolist()}")
    return CollectedProfile(values, mask, np.asarray(history, dtype=np.float64), hour_of_day_offset)


# -- learned estimator ---------------------------------------------------------


@dataclass
class EstimatorParams:
    params: Params
    hidden: int
    n_layers: int = 2
    use_mask: bool = True
    trained: bool = False

    @property
    def encoder(self) -> LstmStack:
        return LstmStack(tuple(f"enc{i}" for i in range(self.n_layers)))

    @property
    def decoder(self) -> LstmStack:
        return LstmStack(tuple(f"dec{i}" for i in range(self.n_layers)))

    @property
    def n_inputs(self) -> int:
        return 4 if self.use_mask else 3


def init_estimator(hidden: int = 256, n_layers: int = 2, use_mask: bool = True, rng=None) -> EstimatorParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    ep = EstimatorParams({}, hidden, n_layers, use_mask)
    for name in ("enc", "dec"):
        for i in range(n_layers):
            n_in = hidden if i else ep.n_inputs + (hidden if name == "dec" else 0)
            init_lstm(ep.params, f"{name}{i}", n_in, hidden, rng)
    init_dense(ep.params, "head", hidden, 1, rng)
    # start from the identity map: the correction head begins silent
    ep.params["head.W"] *= 0.0
    return ep


def _inputs(ep: EstimatorParams, values: np.ndarray, flags: np.ndarray, hours: np.ndarray) -> np.ndarray:
    cols = [values[..., None]]
    if ep.use_mask:
        cols.append(flags[..., None].astype(np.float64))
    cols.append(hour_features(hours))
    return np.concatenate(cols, axis=-1)


def _batch_arrays(profiles: Sequence[CollectedProfile]):
    P = np.stack([p.values for p in profiles])
    M = np.stack([p.observed_mask for p in profiles])
    Hh = np.stack([p.history for p in profiles])
    off = np.array([p.hour_of_day_offset for p in profiles])
    return P, M, Hh, off


def _forward(ep: EstimatorParams, P, M, Hh, off):
    B, T = P.shape
    full = np.concatenate([Hh, P], axis=1)
    flags = np.concatenate([np.ones_like(Hh, bool), M], axis=1)
    hours = off[None, :] - HISTORY_LEN + np.arange(HISTORY_LEN + T)[:, None]
    xs_enc = _inputs(ep, full.T, flags.T, hours)
    h_enc, state, enc_cache = forward_sequence(ep.params, ep.encoder, None, xs_enc)
    xs_dec = np.concatenate([xs_enc[HISTORY_LEN:], h_enc[HISTORY_LEN:]], axis=-1)[::-1]
    corr, _, dec_cache = forward_sequence(ep.params, ep.decoder, "head", xs_dec, state0=state)
    return P.T + corr[::-1, :, 0], (enc_cache, dec_cache)


def estimator_loss(ep: EstimatorParams, profiles: Sequence[CollectedProfile], truths: np.ndarray, grad: bool = True):
    P, M, Hh, off = _batch_arrays(profiles)
    out, (enc_cache, dec_cache) = _forward(ep, P, M, Hh, off)
    err = out - np.asarray(truths).T
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise NumericalError("estimator loss is not finite")
    if not grad:
        return loss, None
    grads, dxs, dstate0 = backward_sequence(ep.params, dec_cache, (2.0 / err.size) * err[::-1, :, None])
    enc_douts = np.zeros((len(enc_cache.steps), P.shape[0], ep.hidden))
    enc_douts[HISTORY_LEN:] = dxs[::-1, :, ep.n_inputs :]
    backward_sequence(ep.params, enc_cache, enc_douts, grads, dfinal=dstate0)
    return loss, grads


@dataclass
class EstimatorConfig:
    hidden: int = 256
    n_layers: int = 2
    use_mask: bool = True
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    clip: float = 5.0


def train_estimator(
    profiles: Sequence[CollectedProfile],
    truths: Sequence[np.ndarray],
    config: EstimatorConfig,
    val_profiles: Sequence[CollectedProfile] = (),
    val_truths: Sequence[np.ndarray] = (),
    rng: np.random.Generator | None = None,
) -> tuple[EstimatorParams, list[dict]]:
    """Minimize squared error between estimator output and ground truth."""
    if not len(profiles):
        raise UsageError("train_estimator needs at least one profile")
    rng = rng if rng is not None else np.random.default_rng(0)
    ep = init_estimator(config.hidden, config.n_layers, config.use_mask, rng)
    Y = np.stack(truths)
    opt = AdamState(lr=config.lr)
    history: list[dict] = []
    best, best_loss = None, np.inf
    if len(val_profiles):
        best, best_loss = copy_params(ep.params), estimate_loss(ep, val_profiles, val_truths)
    for epoch in range(config.epochs):
        order = rng.permutation(len(profiles))
        losses = []
        for s in range(0, len(order), config.batch_size):
            b = order[s : s + config.batch_size]
            loss, grads = estimator_loss(ep, [profiles[i] for i in b], Y[b])
            clip_grad_norm(grads, config.clip)
            adam_update(opt, ep.params, grads)
            check_finite(ep.params)
            losses.append(loss)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if len(val_profiles):
            rec["val_loss"] = estimate_loss(ep, val_profiles, val_truths)
            if rec["val_loss"] < best_loss:
                best, best_loss = copy_params(ep.params), rec["val_loss"]
        log.info("estimator %s", rec)
        history.append(rec)
    if best is not None:
        ep.params = best
    ep.trained = True
    return ep, history


def estimate_loss(ep: EstimatorParams, profiles, truths, batch: int = 256) -> float:
    total = 0.0
    for s in range(0, len(profiles), batch):
        loss, _ = estimator_loss(ep, profiles[s : s + batch], np.stack(truths[s : s + batch]), grad=False)
        total += loss * len(profiles[s : s + batch])
    return total / len(profiles)


def estimate_batch(ep: EstimatorParams, profiles: Sequence[CollectedProfile], batch: int = 256) -> np.ndarray:
    if not ep.trained:
        raise UsageError("estimator parameters are untrained")
    outs = []
    for s in range(0, len(profiles), batch):
        out, _ = _forward(ep, *_batch_arrays(profiles[s : s + batch]))
        outs.append(out.T)
    res = np.concatenate(outs, axis=0)
    if not np.all(np.isfinite(res)):
        raise NumericalError("estimator produced non-finite values")
    return res


def estimate(ep: EstimatorParams, profile: CollectedProfile) -> np.ndarray:
    return estimate_batch(ep, [profile])[0]


# -- Gaussian process baseline -------------------------------------------------


@dataclass(frozen=True)
class GprModel:
    times: np.ndarray
    values: np.ndarray
    length_scale: float
    signal_var: float
    noise_var: float
    prior_mean: float
    alpha: np.ndarray


def se_kernel(a, b, length_scale: float, signal_var: float) -> np.ndarray:
    d = np.asarray(a, dtype=np.float64)[:, None] - np.asarray(b, dtype=np.float64)[None, :]
    return signal_var * np.exp(-0.5 * (d / length_scale) ** 2)


def gpr_fit(
    observations: Sequence[tuple[int, float]],
    length_scale: float = 6.0,
    signal_var: float = 1.0,
    noise_var: float = 1e-4,
    prior_mean: float | None = None,
    max_jitter_tries: int = 8,
) -> GprModel:
    obs = sorted((float(t), float(v)) for t, v in observations)
    if len(obs) < 2:
        raise DimensionError("GPR needs at least two observations")
    t = np.array([o[0] for o in obs])
    v = np.array([o[1] for o in obs])
    mu = float(v.mean()) if prior_mean is None else float(prior_mean)
    K = se_kernel(t, t, length_scale, signal_var) + noise_var * np.eye(len(t))
    jitter = 0.0
    for _ in range(max_jitter_tries):
        try:
            cf = linalg.cho_factor(K + jitter * np.eye(len(t)), lower=True)
            break
        except linalg.LinAlgError:
            jitter = max(1e-10 * signal_var, jitter * 10.0)
    else:
        raise NumericalError("kernel matrix is not positive definite after jitter")
    alpha = linalg.cho_solve(cf, v - mu)
    return GprModel(t, v, length_scale, signal_var, noise_var, mu, alpha)


def gpr_predict(m: GprModel, times: Sequence[float] | None = None) -> np.ndarray:
    q = np.arange(TARGET_LEN, dtype=np.float64) if times is None else np.asarray(times, dtype=np.float64)
    return m.prior_mean + se_kernel(q, m.times, m.length_scale, m.signal_var) @ m.alpha


# -- estimator objects for the evaluation loop ---------------------------------


@dataclass
class LstmEstimator:
    ep: EstimatorParams

    def estimate(self, profiles: Sequence[CollectedProfile]) -> np.ndarray:
        return estimate_batch(self.ep, profiles)


@dataclass
class GprEstimator:
    length_scale: float = 6.0
    signal_var: float = 1.0
    noise_var: float = 1e-4

    def estimate(self, profiles: Sequence[CollectedProfile]) -> np.ndarray:
        out = []
        for p in profiles:
            ts = p.observation_times
            if ts.size < 2:
                out.append(p.values.copy())
                continue
            m = gpr_fit(list(zip(ts, p.values[ts])), self.length_scale, self.signal_var, self.noise_var)
            out.append(gpr_predict(m, np.arange(p.values.size)))
        return np.stack(out)
