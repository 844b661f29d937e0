"""Error metrics, observation coverage and DTW distance."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, UndefinedMetricError


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise DimensionError(f"length mismatch: {p.size} vs {g.size}")
    if p.size == 0:
        raise DimensionError("metrics need at least one value")
    return p, g


def rmse(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def mae(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(np.abs(p - g)))


def mape_excluding_zeros(pred, gt) -> float:
    """Mean absolute percentage error over entries whose ground truth is nonzero."""
    p, g = _pair(pred, gt)
    nz = g != 0
    if not nz.any():
        raise UndefinedMetricError("MAPE undefined: ground truth is all zeros")
    return float(np.mean(np.abs(p[nz] - g[nz]) / np.abs(g[nz])) * 100.0)


def coverage(observed_values: Iterable[float]) -> float:
    return float(np.sum(np.asarray(list(observed_values), dtype=np.float64)))


def dtw_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """Unconstrained DTW with squared-difference cost, returned as a root.

    Steps (1,0), (0,1), (1,1); the path runs from (0,0) to (n-1,m-1).
    """
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise DimensionError("DTW needs two nonempty sequences")
    cost = (x[:, None] - y[None, :]) ** 2
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev, c = acc[i], acc[i - 1], cost[i - 1]
        # the diagonal/vertical candidates are vectorized; horizontal needs a scan
        best = np.minimum(prev[1:], prev[:-1]) + c
        for j in range(1, m + 1):
            v = best[j - 1]
            h = row[j - 1] + c[j - 1]
            row[j] = v if v < h else h
    return float(np.sqrt(acc[n, m]))


@dataclass
class MetricReport:
    rmse: float
    mae: float
    mape_pct: float
    coverage: float

    def to_record(self) -> str:
        return "\n".join(f"{k}={v!r}" for k, v in asdict(self).items()) + "\n"

    @classmethod
    def from_record(cls, text: str) -> "MetricReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(**{f.name: float(kv[f.name]) for f in fields(cls)})


METRIC_COLUMNS = ("config", "rmse", "mae", "mape_pct", "coverage")


def write_metrics_csv(path: str | Path, rows: Sequence[tuple[str, MetricReport]]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for name, r in rows:
            w.writerow([name, repr(r.rmse), repr(r.mae), repr(r.mape_pct), repr(r.coverage)])


def read_metrics_csv(path: str | Path) -> list[tuple[str, MetricReport]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        (r["config"], MetricReport(*(float(r[c]) for c in METRIC_COLUMNS[1:]))) for r in rows
    ]


def evaluate(
    estimates: Sequence[np.ndarray], truths: Sequence[np.ndarray], observed: Sequence[np.ndarray]
) -> MetricReport:
    """Pooled errors over all episodes; coverage is the per-episode sum averaged."""
    est = np.concatenate([np.ravel(e) for e in estimates])
    gt = np.concatenate([np.ravel(g) for g in truths])
    cov = float(np.mean([coverage(o) for o in observed])) if len(observed) else 0.0
    return MetricReport(rmse(est, gt), mae(est, gt), mape_excluding_zeros(est, gt), cov)
