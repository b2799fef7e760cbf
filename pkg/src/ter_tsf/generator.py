"""Candidate reinforced-text generation.

Three backends share one interface: ``backend.generate(request)`` returns
exactly ``request.k`` candidates or raises.

* :class:`MockBackend` builds texts from templates; deterministic in
  ``(prompt, seed, index)`` and able to dial the number of keywords.
* :class:`ToyBackend` samples from a bigram :class:`ToyLM` whose exact
  log-probabilities make in-process DPO possible.
* :class:`RemoteBackend` posts to an HTTP text-generation service.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import requests

from ter_tsf.errors import BackendError, ConfigError, DataError

log = logging.getLogger(__name__)

ENDPOINT_ENV = "TER_GEN_ENDPOINT"
TOKEN_ENV = "TER_GEN_TOKEN"

FILLER_TOKENS = (
    "the", "series", "shows", "a", "with", "values", "over", "recent",
    "window", "level", "and", "data", "moves", "is", "period", "this",
)


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    k: int = 2
    temperature: float = 1.0
    max_tokens: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")


@dataclass(frozen=True)
class CandidateText:
    body: str
    backend_id: str
    generation_index: int

    def __post_init__(self):
        if not self.body:
            raise BackendError("generated candidate is empty")


def derive_seed(seed: int, *parts) -> int:
    """Stable 63-bit seed from a master seed and arbitrary labels."""
    h = hashlib.sha256(str(seed).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


# --------------------------------------------------------------------------
# Toy bigram language model


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


@dataclass(frozen=True)
class ToyLM:
    vocabulary: tuple[str, ...]
    bigram_logits: np.ndarray
    start_logits: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        v = len(self.vocabulary)
        big = np.array(self.bigram_logits, dtype=np.float64)
        start = np.array(self.start_logits, dtype=np.float64)
        if len(set(self.vocabulary)) != v or v < 1:
            raise ConfigError("toy LM vocabulary must be non-empty and unique")
        if big.shape != (v, v) or start.shape != (v,):
            raise ConfigError(f"toy LM logits must have shapes ({v},{v}) and ({v},)")
        if not (np.all(np.isfinite(big)) and np.all(np.isfinite(start))):
            raise ConfigError("toy LM logits must be finite")
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        object.__setattr__(self, "bigram_logits", big)
        object.__setattr__(self, "start_logits", start)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.vocabulary)})

    @classmethod
    def uniform(cls, vocabulary: Sequence[str]):
        v = len(vocabulary)
        return cls(tuple(vocabulary), np.zeros((v, v)), np.zeros(v))

    def encode(self, tokens) -> list[int]:
        if isinstance(tokens, str):
            tokens = tokens.split()
        ids = []
        for t in tokens:
            try:
                ids.append(self._index[t])
            except KeyError:
                raise DataError(f"token {t!r} is not in the toy LM vocabulary") from None
        if not ids:
            raise DataError("token sequence must be non-empty")
        return ids

    def with_logits(self, bigram_logits, start_logits) -> "ToyLM":
        return ToyLM(self.vocabulary, bigram_logits, start_logits)

    def to_dict(self):
        return {
            "vocabulary": list(self.vocabulary),
            "start_logits": self.start_logits.tolist(),
            "bigram_logits": self.bigram_logits.tolist(),
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(tuple(obj["vocabulary"]), obj["bigram_logits"], obj["start_logits"])


def default_toy_lm(keywords: Sequence[str], fillers: Sequence[str] = FILLER_TOKENS) -> ToyLM:
    vocab = []
    for phrase in list(keywords) + list(fillers):
        for tok in phrase.split():
            if tok not in vocab:
                vocab.append(tok)
    return ToyLM.uniform(vocab)


def toy_lm_logprob(model: ToyLM, tokens) -> float:
    """Exact log-probability: start term plus one bigram term per transition."""
    ids = model.encode(tokens)
    lp = _log_softmax(model.start_logits)[ids[0]]
    if len(ids) > 1:
        rows = _log_softmax(model.bigram_logits)
        lp += rows[ids[:-1], ids[1:]].sum()
    return float(lp)


def toy_lm_logprob_grad(model: ToyLM, tokens):
    """Gradient of :func:`toy_lm_logprob` wrt (bigram_logits, start_logits)."""
    ids = model.encode(tokens)
    start_p = np.exp(_log_softmax(model.start_logits))
    g_start = -start_p
    g_start[ids[0]] += 1.0
    g_big = np.zeros_like(model.bigram_logits)
    if len(ids) > 1:
        probs = np.exp(_log_softmax(model.bigram_logits))
        for a, b in zip(ids[:-1], ids[1:]):
            g_big[a] -= probs[a]
            g_big[a, b] += 1.0
    return g_big, g_start


def toy_lm_sample(model: ToyLM, length: int, seed: int, temperature: float = 1.0) -> list[str]:
    """Ancestral sampling; ``temperature == 0`` decodes greedily."""
    if length < 1:
        raise ConfigError("sample length must be >= 1")
    rng = np.random.default_rng(seed)

    def draw(logits):
        if temperature == 0:
            return int(np.argmax(logits))
        p = np.exp(_log_softmax(logits / temperature))
        return int(rng.choice(len(p), p=p))

    ids = [draw(model.start_logits)]
    while len(ids) < length:
        ids.append(draw(model.bigram_logits[ids[-1]]))
    return [model.vocabulary[i] for i in ids]


# --------------------------------------------------------------------------
# Backends


class Backend:
    backend_id = "base"
    trainable = False

    def generate(self, request: GenerationRequest) -> list[CandidateText]:
        raise NotImplementedError


def _prompt_series(prompt: str) -> list[float]:
    for line in prompt.splitlines():
        if line.startswith("Series: "):
            try:
                return [float(t) for t in line[len("Series: "):].split()]
            except ValueError:
                return []
    return []


def _prompt_text(prompt: str) -> str:
    marker = "\n\nText:\n"
    if marker not in prompt:
        return ""
    tail = prompt.split(marker, 1)[1]
    body = tail.rsplit("\n\n", 1)[0]
    return "" if body.startswith("No accompanying text") else body.replace("\n---\n", " ")


class MockBackend(Backend):
    """Template generator with a controllable keyword budget.

    ``keyword_counts[i % len(keyword_counts)]`` keywords go into candidate
    ``i``; without it the count is drawn per candidate. The direction phrase
    is read off the serialized series inside the prompt, and any original
    text in the prompt is echoed when ``echo_text`` is set.
    """

    backend_id = "mock"

    def __init__(self, keywords: Sequence[str], keyword_counts: Sequence[int] | None = None,
                 echo_text: bool = True):
        if not keywords:
            raise ConfigError("mock backend needs a keyword list")
        self.keywords = tuple(keywords)
        self.keyword_counts = tuple(keyword_counts) if keyword_counts else None
        self.echo_text = echo_text

    def _direction(self, values):
        if len(values) < 2:
            return "steady"
        third = max(1, len(values) // 3)
        delta = np.mean(values[-third:]) - np.mean(values[:third])
        spread = np.std(values) or 1.0
        if delta > 0.25 * spread:
            return "rising"
        if delta < -0.25 * spread:
            return "falling"
        return "steady"

    def generate(self, request: GenerationRequest) -> list[CandidateText]:
        values = _prompt_series(request.prompt)
        direction = self._direction(values)
        original = _prompt_text(request.prompt) if self.echo_text else ""
        out = []
        for i in range(request.k):
            rng = np.random.default_rng(derive_seed(request.seed, "mock", request.prompt, i))
            if self.keyword_counts is not None:
                n_kw = self.keyword_counts[i % len(self.keyword_counts)]
            else:
                n_kw = int(rng.integers(0, len(self.keywords) + 1))
            chosen = [self.keywords[j] for j in rng.integers(0, len(self.keywords), size=n_kw)]
            parts = [f"The series is {direction} over the recent window."]
            if values:
                parts.append(f"Latest level {values[-1]:.2f}.")
            if chosen:
                parts.append("Notable: " + ", ".join(chosen) + ".")
            if original:
                parts.append(original)
            out.append(CandidateText(" ".join(parts), self.backend_id, i))
        return out


class ToyBackend(Backend):
    """Samples candidates from a :class:`ToyLM`; the prompt only seeds sampling."""

    backend_id = "toy"
    trainable = True

    def __init__(self, model: ToyLM):
        self.model = model

    def generate(self, request: GenerationRequest) -> list[CandidateText]:
        out = []
        for i in range(request.k):
            seed = derive_seed(request.seed, "toy", request.prompt, i)
            tokens = toy_lm_sample(self.model, request.max_tokens, seed, request.temperature)
            out.append(CandidateText(" ".join(tokens), self.backend_id, i))
        return out


class RemoteBackend(Backend):
    """HTTP client: POST JSON ``{prompt, n, temperature, max_tokens, seed}``,
    expect ``{"candidates": [str, ...]}`` with exactly ``n`` entries."""

    backend_id = "remote"

    def __init__(self, endpoint: str | None = None, token: str | None = None, attempts: int = 3,
                 backoff: float = 0.5, timeout: float = 60.0, max_in_flight: int = 4,
                 sleep=time.sleep, session=None):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        if not self.endpoint:
            raise ConfigError(f"remote backend needs an endpoint (set {ENDPOINT_ENV})")
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self._sleep = sleep
        self._session = session or requests.Session()

    def _payload(self, request):
        return {
            "prompt": request.prompt,
            "n": request.k,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "seed": request.seed,
        }

    def generate(self, request: GenerationRequest) -> list[CandidateText]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_exc = None
        for attempt in range(1, self.attempts + 1):
            try:
                resp = self._session.post(self.endpoint, json=self._payload(request),
                                          headers=headers, timeout=self.timeout)
                if resp.status_code >= 500:
                    raise requests.HTTPError(f"server error {resp.status_code}")
                resp.raise_for_status()
                break
            except requests.RequestException as exc:
                last_exc = exc
                log.warning("generation request failed (attempt %d/%d): %s", attempt, self.attempts, exc)
                if attempt < self.attempts:
                    self._sleep(self.backoff * 2 ** (attempt - 1))
        else:
            raise BackendError(
                f"generation service unreachable after {self.attempts} attempts: {last_exc}",
                attempts=self.attempts,
            )
        try:
            texts = resp.json()["candidates"]
        except (ValueError, KeyError, TypeError):
            raise BackendError("malformed generation response: missing 'candidates'") from None
        if (not isinstance(texts, list) or len(texts) != request.k
                or not all(isinstance(t, str) and t for t in texts)):
            raise BackendError(f"malformed generation response: expected {request.k} non-empty strings")
        return [CandidateText(t, self.backend_id, i) for i, t in enumerate(texts)]


def generate_all(backend: Backend, reqs: Sequence[GenerationRequest], workers: int = 1):
    """Run many requests, preserving order. Threads only help the remote backend."""
    if workers <= 1 or len(reqs) <= 1:
        return [backend.generate(r) for r in reqs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(backend.generate, reqs))
