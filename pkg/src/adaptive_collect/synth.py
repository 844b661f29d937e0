"""Synthetic hourly freeway occupancy resembling PeMS detector data.

Each location gets a weekday profile with morning and evening peaks of
location-specific size and timing, damped weekends, a few holiday days,
slow level drift, day-to-day demand noise, hourly noise, outage runs that
read as zero and rare spikes.
"""

from __future__ import annotations

from datetime import datetime, timedelta

import numpy as np

from .data import RawDataset

DEFAULT_START = datetime(2016, 7, 1, 0, 0)
DEFAULT_HOURS = 17_544


def _bump(hours: np.ndarray, center: np.ndarray, width: np.ndarray) -> np.ndarray:
    d = (hours - center + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (d / width) ** 2)


def generate(
    n_locations: int = 861,
    n_hours: int = DEFAULT_HOURS,
    seed: int = 0,
    start: datetime = DEFAULT_START,
) -> RawDataset:
    rng = np.random.default_rng(seed)
    t = np.arange(n_hours)
    hour = ((start.hour + t) % 24).astype(np.float64)
    day = (start.hour + t) // 24
    n_days = int(day[-1]) + 1
    weekday = (start.weekday() + np.arange(n_days)) % 7
    holidays = rng.random(n_days) < 0.012
    offday = (weekday >= 5) | holidays

    series = np.empty((n_locations, n_hours))
    for k in range(n_locations):
        base = rng.uniform(0.008, 0.035)
        am = rng.gamma(2.0, 0.035) * rng.choice([0.25, 1.0, 1.6], p=[0.3, 0.45, 0.25])
        pm = rng.gamma(2.0, 0.035) * rng.choice([0.25, 1.0, 1.6], p=[0.3, 0.45, 0.25])
        am_c, pm_c = rng.normal(7.8, 0.7), rng.normal(17.3, 0.8)
        am_w, pm_w = rng.uniform(1.0, 2.2), rng.uniform(1.3, 2.8)
        midday = rng.uniform(0.02, 0.06)
        weekend_damp = rng.uniform(0.15, 0.55)

        weekday_shape = (
            am * _bump(hour, am_c, am_w)
            + pm * _bump(hour, pm_c, pm_w)
            + midday * _bump(hour, 13.0, 3.5)
        )
        weekend_shape = 0.6 * midday * _bump(hour, 14.0, 4.0) + weekend_damp * (
            0.4 * am * _bump(hour, 11.0, 3.0) + 0.6 * pm * _bump(hour, 16.0, 3.0)
        )
        night = 0.35 + 0.65 * _bump(hour, 14.0, 6.0)

        # slow drift plus persistent day-level demand shocks
        drift = np.cumsum(rng.normal(0.0, 0.01, n_days))
        drift -= np.linspace(0.0, drift[-1], n_days)
        shocks = np.empty(n_days)
        shocks[0] = rng.normal(0.0, 0.12)
        for d in range(1, n_days):
            shocks[d] = 0.6 * shocks[d - 1] + rng.normal(0.0, 0.1)
        level = np.exp(drift + shocks)[day]

        off = offday[day]
        peak = np.where(off, weekend_shape, weekday_shape)
        x = (base * night + peak) * level
        x *= np.exp(rng.normal(0.0, 0.07, n_hours))

        # detector outages read as zero runs
        for s in np.flatnonzero(rng.random(n_hours) < 0.0015):
            x[s : s + rng.integers(1, 10)] = 0.0
        spikes = rng.random(n_hours) < 0.0008
        x[spikes] *= rng.uniform(2.0, 4.0, spikes.sum())
        series[k] = np.clip(np.round(x, 4), 0.0, 1.0)

    stamps = [start + timedelta(hours=int(i)) for i in t]
    return RawDataset([str(i) for i in range(n_locations)], series, stamps)
