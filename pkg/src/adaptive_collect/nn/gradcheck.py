"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .layers import Params


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, int]
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    # the floor keeps coordinates whose true gradient is ~0 from dominating
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    loss_fn: Callable[[Params], float],
    params: Params,
    grads: Params,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    keys: Iterable[str] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``grads`` against central differences of ``loss_fn`` over ``params``.

    ``loss_fn`` is evaluated with ``params`` perturbed in place, one
    coordinate at a time.  With ``max_coords`` a random subset of each
    tensor is checked.
    """
    worst, worst_at, n = 0.0, ("", -1), 0
    for k in keys or list(params):
        p = params[k].reshape(-1)
        g = grads[k].reshape(-1)
        idx = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(p.size, max_coords, replace=False)
        for i in idx:
            old = p[i]
            p[i] = old + h
            lp = loss_fn(params)
            p[i] = old - h
            lm = loss_fn(params)
            p[i] = old
            err = relative_error(float(g[i]), (lp - lm) / (2.0 * h))
            n += 1
            if err > worst:
                worst, worst_at = err, (k, int(i))
    return GradCheckReport(worst, worst_at, n, tolerance)
