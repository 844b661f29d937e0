"""Dense and LSTM layers with explicit forward caches and backward passes.

Parameters live in flat ``dict[str, ndarray]`` containers keyed
``"<prefix>.<name>"`` so that one optimizer, one checkpoint writer and one
gradient checker serve every network in the package.  All arrays are
float64 and batched along axis 0.

LSTM gate blocks are laid out ``[input, forget, output, candidate]`` along
the last axis of ``Wx`` (in, 4H), ``Wh`` (H, 4H) and ``b`` (4H).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, NumericalError

Params = dict[str, np.ndarray]


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sub(params: Params, prefix: str) -> Params:
    """View of the entries under ``prefix`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def check_finite(arrays: Params, what: str = "parameters") -> None:
    for k, v in arrays.items():
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite values in {what} {k!r}")


def _xavier(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def init_dense(params: Params, prefix: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    params[f"{prefix}.W"] = _xavier(rng, n_in, n_out)
    params[f"{prefix}.b"] = np.zeros(n_out)


def init_lstm(params: Params, prefix: str, n_in: int, n_hidden: int, rng: np.random.Generator) -> None:
    params[f"{prefix}.Wx"] = _xavier(rng, n_in, 4 * n_hidden)
    params[f"{prefix}.Wh"] = _xavier(rng, n_hidden, 4 * n_hidden)
    b = np.zeros(4 * n_hidden)
    b[n_hidden : 2 * n_hidden] = 1.0
    params[f"{prefix}.b"] = b


# -- dense -----------------------------------------------------------------


def dense_forward(p: Params, x: np.ndarray, activation: str | None = None):
    if x.shape[-1] != p["W"].shape[0]:
        raise DimensionError(f"dense input dim {x.shape[-1]} != {p['W'].shape[0]}")
    y = x @ p["W"] + p["b"]
    if activation == "relu":
        y = np.maximum(y, 0.0)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")
    return y, (x, y, activation)


def dense_backward(p: Params, cache, dy: np.ndarray, grads: Params) -> np.ndarray:
    x, y, activation = cache
    if activation == "relu":
        dy = dy * (y > 0.0)
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads["W"] += x2.T @ dy2
    grads["b"] += dy2.sum(axis=0)
    return dy @ p["W"].T


# -- single LSTM cell ------------------------------------------------------


def lstm_step(p: Params, x: np.ndarray, h: np.ndarray, c: np.ndarray, mask: np.ndarray | None = None):
    """One LSTM update for a batch.  Rows with ``mask == 0`` keep their state."""
    H = h.shape[-1]
    if p["Wh"].shape != (H, 4 * H) or x.shape[-1] != p["Wx"].shape[0] or c.shape != h.shape:
        raise DimensionError(
            f"lstm dims: x {x.shape}, h {h.shape}, c {c.shape}, Wx {p['Wx'].shape}, Wh {p['Wh'].shape}"
        )
    z = x @ p["Wx"] + h @ p["Wh"] + p["b"]
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H : 2 * H])
    o = sigmoid(z[:, 2 * H : 3 * H])
    g = np.tanh(z[:, 3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = mask[:, None]
        h_new = m * h_new + (1.0 - m) * h
        c_new = m * c_new + (1.0 - m) * c
    return h_new, c_new, (x, h, c, i, f, o, g, tc, mask)


def lstm_step_backward(p: Params, cache, dh: np.ndarray, dc: np.ndarray, grads: Params):
    x, h, c, i, f, o, g, tc, mask = cache
    if mask is not None:
        m = mask[:, None]
        dh_skip, dc_skip = (1.0 - m) * dh, (1.0 - m) * dc
        dh, dc = m * dh, m * dc
    dct = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [
            dct * g * i * (1.0 - i),
            dct * c * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dct * i * (1.0 - g * g),
        ],
        axis=1,
    )
    grads["Wx"] += x.T @ dz
    grads["Wh"] += h.T @ dz
    grads["b"] += dz.sum(axis=0)
    dx = dz @ p["Wx"].T
    dh_prev = dz @ p["Wh"].T
    dc_prev = dct * f
    if mask is not None:
        dh_prev += dh_skip
        dc_prev += dc_skip
    return dx, dh_prev, dc_prev


# -- stacked LSTM + sequences ---------------------------------------------


@dataclass(frozen=True)
class LstmStack:
    """Names of the LSTM layers of a stack, bottom first."""

    prefixes: tuple[str, ...]

    def hidden(self, params: Params) -> int:
        return params[f"{self.prefixes[0]}.Wh"].shape[0]

    def zero_state(self, params: Params, batch: int) -> np.ndarray:
        """State array shaped (batch, layers, 2, H); index 0 is h, 1 is c."""
        return np.zeros((batch, len(self.prefixes), 2, self.hidden(params)))

    def step(self, params: Params, x: np.ndarray, state: np.ndarray, mask=None):
        new = np.empty_like(state)
        caches = []
        inp = x
        for l, pre in enumerate(self.prefixes):
            h, c, cache = lstm_step(sub(params, pre), inp, state[:, l, 0], state[:, l, 1], mask)
            new[:, l, 0], new[:, l, 1] = h, c
            caches.append(cache)
            inp = h
        return inp, new, caches

    def step_backward(self, params: Params, caches, dtop: np.ndarray, dstate: np.ndarray, grads: Params):
        """Backprop one stacked step.  ``dstate`` is the gradient w.r.t. the new state."""
        dprev = np.empty_like(dstate)
        dinp = dtop
        for l in range(len(self.prefixes) - 1, -1, -1):
            pre = self.prefixes[l]
            g = _GradView(grads, pre)
            dx, dh, dc = lstm_step_backward(
                sub(params, pre), caches[l], dinp + dstate[:, l, 0], dstate[:, l, 1], g
            )
            dprev[:, l, 0], dprev[:, l, 1] = dh, dc
            dinp = dx
        return dinp, dprev


class _GradView(dict):
    """Write-through view so layer backward code can use short keys."""

    def __init__(self, grads: Params, prefix: str):
        super().__init__()
        self._g, self._p = grads, prefix + "."

    def __getitem__(self, k):
        return self._g[self._p + k]

    def __setitem__(self, k, v):
        self._g[self._p + k] = v


@dataclass
class SequenceCache:
    stack: LstmStack
    head: str | None
    steps: list = field(default_factory=list)  # (stack caches, head cache | None)
    state0: np.ndarray | None = None


def forward_sequence(
    params: Params,
    stack: LstmStack,
    head: str | None,
    xs: np.ndarray,
    state0: np.ndarray | None = None,
    mask: np.ndarray | None = None,
):
    """Unroll ``stack`` (then the dense ``head``, if given) over ``xs`` of shape (T, B, in).

    Returns (outputs (T, B, out), final state, cache).  With T == 0 the
    outputs are empty and the final state is the initial one.
    """
    T, B = xs.shape[0], xs.shape[1]
    state = stack.zero_state(params, B) if state0 is None else state0
    cache = SequenceCache(stack, head, state0=state)
    outs = []
    for t in range(T):
        top, state, sc = stack.step(params, xs[t], state, None if mask is None else mask[t])
        hc = None
        if head is not None:
            top, hc = dense_forward(sub(params, head), top)
        cache.steps.append((sc, hc))
        outs.append(top)
    if outs:
        out = np.stack(outs)
    else:
        width = params[f"{head}.W"].shape[1] if head else stack.hidden(params)
        out = np.zeros((0, B, width))
    return out, state, cache


def backward_sequence(
    params: Params,
    cache: SequenceCache,
    douts: np.ndarray,
    grads: Params | None = None,
    dfinal: np.ndarray | None = None,
):
    """BPTT through a cached unroll.

    Returns (grads, dxs (T, B, in), dstate0).  ``dfinal`` is an optional
    gradient on the final state (used to chain a decoder into its encoder).
    """
    if len(douts) != len(cache.steps):
        raise DimensionError(f"{len(douts)} output grads for {len(cache.steps)} cached steps")
    if grads is None:
        grads = zeros_like(params)
    stack, head = cache.stack, cache.head
    dstate = np.zeros_like(cache.state0) if dfinal is None else dfinal.copy()
    dxs = [None] * len(cache.steps)
    for t in range(len(cache.steps) - 1, -1, -1):
        sc, hc = cache.steps[t]
        dtop = douts[t]
        if head is not None:
            dtop = dense_backward(sub(params, head), hc, dtop, _GradView(grads, head))
        dxs[t], dstate = stack.step_backward(params, sc, dtop, dstate, grads)
    dx = np.stack(dxs) if dxs else np.zeros((0,) + cache.state0.shape[:1] + (0,))
    return grads, dx, dstate
