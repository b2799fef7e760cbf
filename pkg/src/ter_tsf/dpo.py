"""Preference pairs and direct preference optimization on the toy LM."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ter_tsf.errors import ConfigError, DataError
from ter_tsf.generator import ToyLM, toy_lm_logprob, toy_lm_logprob_grad
from ter_tsf.reward import Ranking

PAIR_FIELDS = ("prompt", "chosen", "rejected", "reward_chosen", "reward_rejected", "sample_id", "round")


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    chosen: str
    rejected: str
    reward_chosen: float
    reward_rejected: float
    sample_id: str = ""
    round: int = 1

    def __post_init__(self):
        if self.reward_chosen < self.reward_rejected:
            raise DataError("chosen reward must be >= rejected reward")
        if self.chosen == self.rejected:
            raise DataError("chosen and rejected texts must differ")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1
    learning_rate: float = 5e-5
    steps_per_round: int = 1

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("DPO beta must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.steps_per_round < 0:
            raise ConfigError("steps_per_round must be >= 0")


def log_sigmoid(x: float) -> float:
    # branch on sign so neither side overflows
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def build_pairs(ranked: Iterable[tuple[str, str, Ranking | None]], round: int):
    """One pair per non-degenerate ``(sample_id, prompt, ranking)`` entry.

    Returns ``(pairs, skipped)``; degenerate rankings and the (defensive)
    chosen == rejected case both count as skipped.
    """
    pairs, skipped = [], 0
    for sample_id, prompt, ranking in ranked:
        if ranking is None or ranking.best.candidate.body == ranking.worst.candidate.body:
            skipped += 1
            continue
        pairs.append(
            PreferencePair(
                prompt=prompt,
                chosen=ranking.best.candidate.body,
                rejected=ranking.worst.candidate.body,
                reward_chosen=ranking.best.r,
                reward_rejected=ranking.worst.r,
                sample_id=sample_id,
                round=round,
            )
        )
    return pairs, skipped


def preference_score(r_plus: float, r_minus: float, beta: float) -> float:
    """log[exp(b r+) / (exp(b r+) + exp(b r-))] = log sigmoid(b (r+ - r-))."""
    if not beta > 0:
        raise ConfigError("beta must be positive")
    return log_sigmoid(beta * (r_plus - r_minus))


def dpo_margin(policy: ToyLM, reference: ToyLM, pair: PreferencePair) -> float:
    return (toy_lm_logprob(policy, pair.chosen) - toy_lm_logprob(reference, pair.chosen)) - (
        toy_lm_logprob(policy, pair.rejected) - toy_lm_logprob(reference, pair.rejected)
    )


def dpo_loss(policy: ToyLM, reference: ToyLM, pair: PreferencePair, beta: float) -> float:
    """-log sigmoid(beta * implicit-reward margin of chosen over rejected)."""
    return -log_sigmoid(beta * dpo_margin(policy, reference, pair))


def policy_margin(policy: ToyLM, pair: PreferencePair) -> float:
    return toy_lm_logprob(policy, pair.chosen) - toy_lm_logprob(policy, pair.rejected)


def batch_loss(policy, reference, pairs, beta) -> float:
    return float(np.mean([dpo_loss(policy, reference, p, beta) for p in pairs]))


def dpo_grad(policy: ToyLM, reference: ToyLM, pairs: Sequence[PreferencePair], beta: float):
    """Analytic gradient of the batch-mean DPO loss wrt (bigram, start) logits."""
    if not pairs:
        raise DataError("DPO batch is empty")
    g_big = np.zeros_like(policy.bigram_logits)
    g_start = np.zeros_like(policy.start_logits)
    for pair in pairs:
        m = dpo_margin(policy, reference, pair)
        # d/dm of -log sigmoid(beta m) = -beta sigmoid(-beta m)
        coef = -beta * sigmoid(-beta * m) / len(pairs)
        cb, cs = toy_lm_logprob_grad(policy, pair.chosen)
        rb, rs = toy_lm_logprob_grad(policy, pair.rejected)
        g_big += coef * (cb - rb)
        g_start += coef * (cs - rs)
    return g_big, g_start


def dpo_step(policy: ToyLM, reference: ToyLM, pairs: Sequence[PreferencePair], cfg: DpoConfig) -> ToyLM:
    g_big, g_start = dpo_grad(policy, reference, pairs, cfg.beta)
    if not (np.all(np.isfinite(g_big)) and np.all(np.isfinite(g_start))):
        raise DataError("non-finite DPO gradient")
    return policy.with_logits(
        policy.bigram_logits - cfg.learning_rate * g_big,
        policy.start_logits - cfg.learning_rate * g_start,
    )


def train_dpo(policy: ToyLM, pairs: Sequence[PreferencePair], cfg: DpoConfig, reference: ToyLM | None = None):
    """``cfg.steps_per_round`` full-batch steps against a frozen reference.

    The reference defaults to the incoming policy, i.e. a snapshot taken at
    the start of the round.
    """
    reference = policy if reference is None else reference
    for _ in range(cfg.steps_per_round):
        policy = dpo_step(policy, reference, pairs, cfg)
    return policy


def export_pairs(pairs: Sequence[PreferencePair], path) -> int:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            d = asdict(p)
            fh.write(json.dumps({k: d[k] for k in PAIR_FIELDS}, ensure_ascii=False) + "\n")
    return len(pairs)


def load_pairs(path) -> list[PreferencePair]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(PreferencePair(**{k: obj[k] for k in PAIR_FIELDS}))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad preference pair ({exc})") from None
    return out
