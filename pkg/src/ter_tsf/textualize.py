"""Render a lookback window as text and assemble the generator prompt."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from datetime import datetime
from decimal import ROUND_DOWN, Decimal
from fractions import Fraction
from typing import Sequence

from ter_tsf.errors import DataError

DEFAULT_TASK_PROMPT = "Making predictions based on the information above."
MISSING_TEXT = "No accompanying text is available."
TEXT_SEPARATOR = "---"

_QUANTUM = Decimal("0.0001")
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


def _truncate_decimal(x: float) -> Decimal:
    if not math.isfinite(x):
        raise DataError(f"cannot serialize non-finite value {x!r}")
    # repr gives the shortest string that round-trips, so 0.3 truncates as
    # "0.3000" rather than as its binary expansion 0.29999...
    d = Decimal(repr(float(x))).quantize(_QUANTUM, rounding=ROUND_DOWN)
    return d if d != 0 else Decimal("0.0000")


def truncate4(x: float) -> str:
    """Fixed 4-fractional-digit string, truncated toward zero."""
    return format(_truncate_decimal(x), "f")


def _format_fraction(q: Fraction) -> str:
    sign = "-" if q < 0 else ""
    scaled = math.floor(abs(q) * 10_000)
    if scaled == 0:
        return "0.0000"
    return f"{sign}{scaled // 10_000}.{scaled % 10_000:04d}"


@dataclass(frozen=True)
class SerializedSeries:
    s_txt: str
    a_txt: str


@dataclass(frozen=True)
class Prompt:
    s_txt: str
    a_txt: str
    original_text: str
    task_prompt: str
    rendered: str

    def __str__(self):
        return self.rendered


def serialize_series(lookback: Sequence[float]) -> str:
    values = list(lookback)
    if not values:
        raise DataError("cannot serialize an empty lookback")
    return " ".join(truncate4(v) for v in values)


def parse_series(s_txt: str) -> list[float]:
    return [float(tok) for tok in s_txt.split()]


def describe_series(
    lookback: Sequence[float],
    frequency: str | None = None,
    span: tuple[datetime, datetime] | None = None,
) -> str:
    """Descriptor lines for the lookback.

    Every statistic is computed exactly on the truncated values, with the
    population (divide-by-N) variance, and displayed truncated.
    """
    values = list(lookback)
    if not values:
        raise DataError("cannot describe an empty lookback")
    exact = [Fraction(_truncate_decimal(v)) for v in values]
    n = len(exact)
    mean = sum(exact) / n
    var = sum((v - mean) ** 2 for v in exact) / n
    lines = [
        f"Mean: {_format_fraction(mean)}, Variance: {_format_fraction(var)}",
        f"Min: {_format_fraction(min(exact))}, Max: {_format_fraction(max(exact))}",
        f"Count: {n}",
        f"Frequency: {frequency or 'unknown'}",
    ]
    if span is not None:
        lines.append(f"Span: {span[0].date().isoformat()} to {span[1].date().isoformat()}")
    return "\n".join(lines)


def serialize(lookback, frequency=None, span=None) -> SerializedSeries:
    return SerializedSeries(serialize_series(lookback), describe_series(lookback, frequency, span))


def assemble_prompt(
    s_txt: str,
    a_txt: str,
    original_texts: Sequence[str] = (),
    task_prompt: str = DEFAULT_TASK_PROMPT,
) -> Prompt:
    if not task_prompt or not task_prompt.strip():
        raise DataError("task prompt must be non-empty")
    bodies = [t for t in original_texts if t]
    original = f"\n{TEXT_SEPARATOR}\n".join(bodies) if bodies else MISSING_TEXT
    rendered = "\n\n".join(
        [
            f"Series: {s_txt}",
            f"Statistics:\n{a_txt}",
            f"Text:\n{original}",
            task_prompt,
        ]
    )
    return Prompt(s_txt, a_txt, original, task_prompt, rendered)


def prompt_for_sample(sample, frequency=None, task_prompt: str = DEFAULT_TASK_PROMPT) -> Prompt:
    ser = serialize(sample.lookback, frequency, sample.lookback_span)
    return assemble_prompt(ser.s_txt, ser.a_txt, [t.body for t in sample.texts], task_prompt)
