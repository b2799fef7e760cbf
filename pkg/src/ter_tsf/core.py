"""Data model, ingestion, chronological splitting, normalization and windowing."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from ter_tsf.errors import ConfigError, DataError

FREQUENCIES = ("daily", "weekly", "monthly")


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def parse_instant(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text)


@dataclass(frozen=True)
class FrequencyConfig:
    lookback: int
    horizons: tuple[int, ...]

    def __post_init__(self):
        if self.lookback < 1 or not self.horizons or min(self.horizons) < 1:
            raise ConfigError(f"invalid frequency config {self.lookback}/{self.horizons}")


# Time-MMD window settings per sampling frequency.
FREQUENCY_CONFIGS = {
    "monthly": FrequencyConfig(36, (6, 12, 18)),
    "weekly": FrequencyConfig(96, (12, 24, 36)),
    "daily": FrequencyConfig(336, (48, 96, 192)),
}


def frequency_config(frequency: str) -> FrequencyConfig:
    try:
        return FREQUENCY_CONFIGS[frequency]
    except KeyError:
        raise ConfigError(f"unknown frequency {frequency!r}; expected one of {FREQUENCIES}") from None


@dataclass(frozen=True)
class TimeSeries:
    domain_name: str
    frequency: str
    timestamps: tuple[datetime, ...]
    values: np.ndarray
    split: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if self.frequency not in FREQUENCIES:
            raise DataError(f"unknown frequency {self.frequency!r}")
        if len(self.timestamps) != len(self.values):
            raise DataError("timestamps and values differ in length")
        if len(self.values) < 1:
            raise DataError("time series must contain at least one observation")
        if not np.all(np.isfinite(self.values)):
            raise DataError("time series contains non-finite values")
        for a, b in zip(self.timestamps, self.timestamps[1:]):
            if not a < b:
                raise DataError(f"timestamps not strictly increasing at {b.isoformat()}")

    def __len__(self):
        return len(self.values)

    def with_values(self, values) -> "TimeSeries":
        return replace(self, values=values)


@dataclass(frozen=True)
class TextRecord:
    start: datetime
    end: datetime
    body: str
    source: str | None = None
    missing: bool = False

    def __post_init__(self):
        if self.start > self.end:
            raise DataError(f"text record ends before it starts ({self.start.isoformat()})")
        if not self.body and not self.missing:
            raise DataError("empty text body must be flagged missing")

    def intersects(self, lo: datetime, hi: datetime) -> bool:
        return self.start <= hi and self.end >= lo


@dataclass(frozen=True)
class Sample:
    lookback: np.ndarray
    horizon_truth: np.ndarray
    lookback_span: tuple[datetime, datetime]
    horizon_span: tuple[datetime, datetime]
    texts: tuple[TextRecord, ...] = ()
    split: str = "full"
    sample_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "lookback", _frozen(self.lookback))
        object.__setattr__(self, "horizon_truth", _frozen(self.horizon_truth))
        object.__setattr__(self, "texts", tuple(self.texts))

    @property
    def raw_text(self) -> str:
        return " ".join(t.body for t in self.texts if t.body)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DataError("normalization std must be positive")


@dataclass
class Dataset:
    series: TimeSeries
    texts: list[TextRecord] = field(default_factory=list)

    @property
    def name(self):
        return self.series.domain_name


def load_dataset(series_path, texts_path=None, domain_name=None, frequency="monthly"):
    """Read a ``timestamp,value`` CSV and an optional JSONL of text records.

    Rows may arrive in any order; output is sorted by timestamp. Duplicate
    instants, unparseable rows and non-finite values raise :class:`DataError`
    naming the offending line.
    """
    series_path = Path(series_path)
    rows = []
    with series_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["timestamp", "value"]:
            raise DataError(f"{series_path}: header must be 'timestamp,value'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"{series_path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                ts = parse_instant(row[0])
                val = float(row[1])
            except ValueError as exc:
                raise DataError(f"{series_path}:{lineno}: unparseable row ({exc})") from None
            if not math.isfinite(val):
                raise DataError(f"{series_path}:{lineno}: non-finite value {row[1].strip()!r}")
            rows.append((ts, val, lineno))
    if not rows:
        raise DataError(f"{series_path}: no observations")
    rows.sort(key=lambda r: r[0])
    for prev, cur in zip(rows, rows[1:]):
        if prev[0] == cur[0]:
            raise DataError(
                f"{series_path}:{cur[2]}: duplicate timestamp {cur[0].isoformat()}"
            )
    series = TimeSeries(
        domain_name=domain_name or series_path.stem,
        frequency=frequency,
        timestamps=[r[0] for r in rows],
        values=[r[1] for r in rows],
    )
    records = load_texts(texts_path) if texts_path is not None else []
    return series, records


def load_texts(path) -> list[TextRecord]:
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                body = obj.get("body") or ""
                rec = TextRecord(
                    start=parse_instant(obj["start"]),
                    end=parse_instant(obj["end"]),
                    body=body,
                    source=obj.get("source"),
                    missing=bool(obj.get("missing", not body)),
                )
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise DataError(f"{path}:{lineno}: bad text record ({exc})") from None
            records.append(rec)
    records.sort(key=lambda r: (r.start, r.end))
    return records


def chronological_split(series: TimeSeries, ratios=(0.7, 0.1, 0.2)):
    """Split into contiguous train/val/test segments.

    Train and val take ``floor(ratio * N)`` points; test takes the remainder.
    """
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(series)
    if n < 10:
        raise DataError(f"series of length {n} is too short to split (need >= 10)")
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"series of length {n} yields an empty split")
    cuts = [(0, n_train, "train"), (n_train, n_train + n_val, "val"), (n_train + n_val, n, "test")]
    return tuple(
        replace(series, timestamps=series.timestamps[a:b], values=series.values[a:b], split=name)
        for a, b, name in cuts
    )


def znorm_fit(train: TimeSeries | Sequence[float]) -> NormStats:
    values = np.asarray(train.values if isinstance(train, TimeSeries) else train, dtype=np.float64)
    if values.size < 2:
        raise DataError("need at least 2 training values to fit normalization")
    std = float(values.std())
    if std == 0.0:
        raise DataError("cannot normalize a constant series")
    return NormStats(float(values.mean()), std)


def znorm_apply(values, stats: NormStats) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.std


def znorm_invert(values, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


def window_count(n: int, lookback: int, horizon: int, stride: int = 1) -> int:
    return max(0, (n - lookback - horizon) // stride + 1)


def make_windows(segment: TimeSeries, lookback: int, horizon: int, stride: int = 1) -> list[Sample]:
    if lookback < 1 or horizon < 1 or stride < 1:
        raise ConfigError("lookback, horizon and stride must all be >= 1")
    ts, vals = segment.timestamps, segment.values
    out = []
    for w in range(window_count(len(vals), lookback, horizon, stride)):
        i = w * stride
        j = i + lookback
        out.append(
            Sample(
                lookback=vals[i:j],
                horizon_truth=vals[j : j + horizon],
                lookback_span=(ts[i], ts[j - 1]),
                horizon_span=(ts[j], ts[j + horizon - 1]),
                split=segment.split,
                sample_id=f"{segment.domain_name}/{segment.split}/{i}",
            )
        )
    return out


def attach_texts(sample: Sample, records: Sequence[TextRecord]) -> Sample:
    lo, hi = sample.lookback_span
    picked = []
    for rec in records:
        if rec.start > hi:
            break
        if rec.intersects(lo, hi):
            picked.append(rec)
    return replace(sample, texts=tuple(picked))
