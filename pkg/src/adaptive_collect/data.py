"""Occupancy CSV loading, location splits, episode windows and scaling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateScaleError, ParseError, StructuralError

HISTORY_LEN = 48
TARGET_LEN = 168
WINDOW_LEN = HISTORY_LEN + TARGET_LEN


@dataclass
class RawDataset:
    location_ids: list[str]
    series: np.ndarray  # (n_locations, n_hours)
    timestamps: list[datetime]

    def __post_init__(self) -> None:
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.series.ndim != 2:
            raise StructuralError("series must be a 2-D array (locations x hours)")
        if self.series.shape[0] != len(self.location_ids):
            raise StructuralError(
                f"{len(self.location_ids)} location ids for {self.series.shape[0]} series"
            )
        if self.series.shape[1] != len(self.timestamps):
            raise StructuralError(
                f"{len(self.timestamps)} timestamps for series of length {self.series.shape[1]}"
            )
        if not np.all(np.isfinite(self.series)):
            raise StructuralError("series contain non-finite values")

    @property
    def n_locations(self) -> int:
        return len(self.location_ids)

    @property
    def first_hour(self) -> int:
        return self.timestamps[0].hour if self.timestamps else 0

    def subset(self, indices: Sequence[int]) -> "RawDataset":
        idx = list(indices)
        return RawDataset(
            [self.location_ids[i] for i in idx], self.series[idx], list(self.timestamps)
        )


@dataclass(frozen=True)
class EpisodeInstance:
    history: np.ndarray
    target: np.ndarray
    hour_of_day_offset: int
    location: str = ""
    window: int = 0

    def __post_init__(self) -> None:
        if len(self.history) != HISTORY_LEN or len(self.target) != TARGET_LEN:
            raise StructuralError(
                f"episode needs {HISTORY_LEN}+{TARGET_LEN} points, "
                f"got {len(self.history)}+{len(self.target)}"
            )


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError(f"bad split ratios {self.ratios}")
        if not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
            raise ValueError(f"split ratios must sum to 1, got {sum(self.ratios)}")


@dataclass(frozen=True)
class Normalizer:
    min: float
    max: float

    def __post_init__(self) -> None:
        if not self.max > self.min:
            raise DegenerateScaleError(f"max ({self.max}) must exceed min ({self.min})")

    @property
    def scale(self) -> float:
        return self.max - self.min

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.min) / self.scale

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale + self.min


def _parse_timestamp(text: str, line: int) -> datetime:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise ParseError(f"bad timestamp {text!r}", line) from None


def load_csv(path: str | Path) -> RawDataset:
    """Read a wide hourly CSV: timestamp column followed by one column per location."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StructuralError(f"{path}: empty file") from None
        if len(header) < 2:
            raise StructuralError(f"{path}: need a timestamp column and >=1 location column")
        ncol = len(header)
        stamps: list[datetime] = []
        rows: list[list[float]] = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != ncol:
                raise StructuralError(
                    f"{path}: line {line} has {len(row)} fields, header has {ncol}"
                )
            stamps.append(_parse_timestamp(row[0], line))
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", line) from None
    for a, b in zip(stamps, stamps[1:]):
        if b <= a:
            raise StructuralError(f"{path}: timestamps not strictly increasing at {b}")
    values = np.array(rows, dtype=np.float64).reshape(len(rows), ncol - 1)
    if not np.all(np.isfinite(values)):
        raise ParseError("non-finite value in data")
    ids = [h.strip() for h in header[1:]]
    return RawDataset(ids, values.T.copy(), stamps)


def write_csv(ds: RawDataset, path: str | Path, fmt: str = "%.6g") -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *ds.location_ids])
        for j, ts in enumerate(ds.timestamps):
            w.writerow([ts.isoformat(sep=" "), *(fmt % v for v in ds.series[:, j])])


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = math.floor(n * ratios[0] + 1e-9)
    n_val = math.floor(n * ratios[1] + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_locations(
    ds: RawDataset, spec: SplitSpec = SplitSpec()
) -> tuple[RawDataset, RawDataset, RawDataset]:
    if ds.n_locations < 3:
        raise StructuralError(f"need >=3 locations to split, got {ds.n_locations}")
    perm = np.random.default_rng(spec.seed).permutation(ds.n_locations)
    n_train, n_val, _ = split_sizes(ds.n_locations, spec.ratios)
    return (
        ds.subset(perm[:n_train]),
        ds.subset(perm[n_train : n_train + n_val]),
        ds.subset(perm[n_train + n_val :]),
    )


def make_episodes(
    series: Sequence[float], first_hour: int = 0, location: str = ""
) -> list[EpisodeInstance]:
    """Tile a series into non-overlapping 216-point windows starting at index 0.

    `first_hour` is the hour of day of series index 0; the trailing remainder
    that does not fill a window is dropped.
    """
    x = np.asarray(series, dtype=np.float64)
    out = []
    for w in range(len(x) // WINDOW_LEN):
        start = w * WINDOW_LEN
        chunk = x[start : start + WINDOW_LEN]
        out.append(
            EpisodeInstance(
                history=chunk[:HISTORY_LEN].copy(),
                target=chunk[HISTORY_LEN:].copy(),
                hour_of_day_offset=(first_hour + start + HISTORY_LEN) % 24,
                location=location,
                window=w,
            )
        )
    return out


def dataset_episodes(ds: RawDataset, max_per_location: int | None = None) -> list[EpisodeInstance]:
    eps: list[EpisodeInstance] = []
    for loc, s in zip(ds.location_ids, ds.series):
        e = make_episodes(s, ds.first_hour, loc)
        eps.extend(e[:max_per_location] if max_per_location else e)
    return eps


def fit_normalizer(train: RawDataset) -> Normalizer:
    return Normalizer(float(train.series.min()), float(train.series.max()))


def normalize_episode(n: Normalizer, ep: EpisodeInstance) -> EpisodeInstance:
    return EpisodeInstance(
        n.apply(ep.history), n.apply(ep.target), ep.hour_of_day_offset, ep.location, ep.window
    )
