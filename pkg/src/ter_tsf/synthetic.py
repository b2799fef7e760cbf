"""Synthetic datasets with known text/series relationships."""

from __future__ import annotations

from datetime import datetime, timedelta

import numpy as np

from ter_tsf.core import Dataset, TextRecord, TimeSeries

_STEP = {"daily": timedelta(days=1), "weekly": timedelta(weeks=1)}

SURGE_TEXTS = (
    "analysts expect a surge in demand next period",
    "reports point to a strong rise in demand ahead",
)
SLUMP_TEXTS = (
    "analysts expect a slump in demand next period",
    "reports point to a sharp fall in demand ahead",
)


def _timestamps(n, frequency, start=datetime(1900, 1, 1)):
    if frequency == "monthly":
        return [datetime(start.year + (start.month - 1 + i) // 12, (start.month - 1 + i) % 12 + 1, 1)
                for i in range(n)]
    step = _STEP[frequency]
    return [start + i * step for i in range(n)]


def text_signal_dataset(n_windows=2000, lookback=36, horizon=6, shift=1.5, noise=0.3, seed=0,
                        name="text_signal"):
    """Back-to-back episodes of ``lookback + horizon`` steps.

    Each episode's horizon is offset by ``+shift`` or ``-shift`` according to
    a hidden coin flip. The flip is independent of the lookback and is stated
    only in one text record spanning that episode's lookback. Windowing with
    ``stride = lookback + horizon`` recovers the episodes exactly;
    ``n_windows`` should be a multiple of 10 so the 7:1:2 split lands on
    episode boundaries.
    """
    rng = np.random.default_rng(seed)
    period = lookback + horizon
    ts = _timestamps(n_windows * period, "daily")
    values = np.empty(n_windows * period)
    texts = []
    for w in range(n_windows):
        base = w * period
        level = rng.normal(0.0, 1.0)
        amp = rng.uniform(0.2, 0.8)
        phase = rng.uniform(0, 2 * np.pi)
        t = np.arange(period)
        seg = level + amp * np.sin(2 * np.pi * t / 12 + phase) + rng.normal(0, noise, period)
        flag = 1 if rng.random() < 0.5 else -1
        seg[lookback:] += flag * shift
        values[base : base + period] = seg
        body = (SURGE_TEXTS if flag > 0 else SLUMP_TEXTS)[int(rng.integers(0, 2))]
        texts.append(TextRecord(ts[base], ts[base + lookback - 1], body, source="synthetic"))
    series = TimeSeries(name, "daily", ts, values)
    return Dataset(series, texts)


def seasonal_dataset(n=400, frequency="monthly", text_every=9, seed=0, name="seasonal"):
    """Trend + seasonality + noise with sparse, loosely related text records."""
    rng = np.random.default_rng(seed)
    ts = _timestamps(n, frequency)
    t = np.arange(n)
    values = 0.01 * t + np.sin(2 * np.pi * t / 12) + rng.normal(0, 0.2, n)
    phrases = (
        "prices moved higher this month",
        "weather disruptions were reported",
        "officials published a routine update",
        "demand was stable across regions",
    )
    texts = [
        TextRecord(ts[i], ts[min(i + 2, n - 1)], phrases[int(rng.integers(0, len(phrases)))], source="synthetic")
        for i in range(0, n, text_every)
    ]
    return Dataset(TimeSeries(name, frequency, ts, values), texts)
