"""Dual reward: forecast accuracy (negative MSE) plus keyword relevance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ter_tsf.errors import ConfigError, DataError
from ter_tsf.generator import CandidateText
from ter_tsf.textualize import tokenize

DEFAULT_KEYWORDS = (
    "peak",
    "fluctuation",
    "seasonality",
    "trend",
    "anomaly",
)


@dataclass(frozen=True)
class RewardConfig:
    w1: float = 1.0
    w2: float = 1.0
    keywords: tuple[str, ...] = DEFAULT_KEYWORDS
    distinct: bool = False  # count each keyword once instead of every occurrence

    def __post_init__(self):
        kws = tuple(" ".join(tokenize(k)) for k in self.keywords)
        if not kws or any(not k for k in kws):
            raise ConfigError("keyword set must be non-empty and contain no blank phrases")
        if len(set(kws)) != len(kws):
            raise ConfigError("keyword set contains duplicate phrases")
        if not (math.isfinite(self.w1) and math.isfinite(self.w2)):
            raise ConfigError("reward weights must be finite")
        object.__setattr__(self, "keywords", kws)


@dataclass(frozen=True)
class ScoredCandidate:
    candidate: CandidateText
    r1: float
    r2: float
    r: float
    prediction: tuple[float, ...] = field(default=(), compare=False)

    @property
    def generation_index(self):
        return self.candidate.generation_index


@dataclass(frozen=True)
class Ranking:
    best: ScoredCandidate
    worst: ScoredCandidate


def load_keywords(path) -> tuple[str, ...]:
    """One phrase per line; blank lines and ``#`` comments are skipped."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip().lower()
        if line:
            out.append(line)
    return tuple(out)


def reward_accuracy(truth: Sequence[float], prediction: Sequence[float]) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if truth.shape != prediction.shape or truth.ndim != 1 or truth.size < 1:
        raise DataError(f"truth/prediction shapes differ or are empty: {truth.shape} vs {prediction.shape}")
    return -float(np.mean((truth - prediction) ** 2))


def keyword_hits(text: str, keywords: Sequence[str], distinct: bool = False) -> int:
    words = tokenize(text)
    hits = 0
    for phrase in keywords:
        parts = phrase.split()
        n = len(parts)
        count = sum(1 for i in range(len(words) - n + 1) if words[i : i + n] == parts)
        hits += min(count, 1) if distinct else count
    return hits


def reward_relevance(text: str, keywords: Sequence[str], distinct: bool = False) -> float:
    if not keywords:
        raise ConfigError("keyword set must be non-empty")
    return keyword_hits(text, keywords, distinct) / len(keywords)


def combine(r1: float, r2: float, cfg: RewardConfig) -> float:
    return cfg.w1 * r1 + cfg.w2 * r2


def score_candidate(candidate: CandidateText, truth, prediction, cfg: RewardConfig) -> ScoredCandidate:
    r1 = reward_accuracy(truth, prediction)
    r2 = reward_relevance(candidate.body, cfg.keywords, cfg.distinct)
    return ScoredCandidate(candidate, r1, r2, combine(r1, r2, cfg), tuple(float(p) for p in prediction))


def rank_candidates(scored: Sequence[ScoredCandidate]) -> Ranking | None:
    """Best/worst by combined reward; ties go to the lowest generation index.

    Returns ``None`` when every candidate has the same reward (degenerate:
    no preference can be formed).
    """
    if len(scored) < 2:
        raise DataError("ranking needs at least two candidates")
    ordered = sorted(scored, key=lambda s: s.generation_index)
    rewards = [s.r for s in ordered]
    if max(rewards) == min(rewards):
        return None
    best = max(ordered, key=lambda s: s.r)  # max/min keep the first of equals
    worst = min(ordered, key=lambda s: s.r)
    return Ranking(best, worst)
