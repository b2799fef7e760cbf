"""The closed refinement loop, evaluation and reporting."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ter_tsf.core import (
    Dataset,
    Sample,
    attach_texts,
    chronological_split,
    frequency_config,
    make_windows,
    znorm_apply,
    znorm_fit,
)
from ter_tsf.dpo import DpoConfig, PreferencePair, build_pairs, export_pairs, train_dpo
from ter_tsf.errors import ConfigError, DataError, TerError
from ter_tsf.forecaster import ForecasterConfig, ForecasterParams, predict_batch, train_forecaster
from ter_tsf.generator import (
    Backend,
    GenerationRequest,
    MockBackend,
    RemoteBackend,
    ToyBackend,
    default_toy_lm,
    derive_seed,
    generate_all,
)
from ter_tsf.reward import RewardConfig, rank_candidates, score_candidate
from ter_tsf.textualize import DEFAULT_TASK_PROMPT, prompt_for_sample

log = logging.getLogger(__name__)

MODES = ("tsf_only", "tsf_text", "tsf_ter", "tsf_ter_r1", "tsf_ter_r12")
RL_MODES = ("tsf_ter_r1", "tsf_ter_r12")
BACKENDS = ("mock", "toy", "remote")

DEFAULT_FORECASTER = {
    "patch_len": 16, "stride": 8, "d_model": 64, "encoder_layers": 2, "heads": 4,
    "head_hidden": 64, "ff_hidden": 128, "learning_rate": 1e-3, "epochs": 100,
    "batch_size": 64, "patience": 10, "clip_norm": 1.0, "max_vocab": 5000,
}


@dataclass
class GeneratorConfig:
    backend: str = "mock"
    temperature: float = 1.0
    max_tokens: int = 16
    keyword_counts: list[int] | None = None
    echo_text: bool = True
    workers: int = 1
    toy_fillers: list[str] | None = None


@dataclass
class PipelineConfig:
    rounds: int = 4
    k: int = 2
    beta: float = 0.1
    dpo_learning_rate: float = 5e-5
    dpo_steps_per_round: int = 1
    w1: float = 1.0
    w2: float = 1.0
    keywords: list[str] = field(default_factory=lambda: list(RewardConfig().keywords))
    distinct_keywords: bool = False
    forecaster: dict = field(default_factory=dict)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    seed: int = 0
    mode: str = "tsf_ter_r12"
    lookback: int | None = None
    horizons: list[int] | None = None
    window_stride: int = 1
    split_ratios: list[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    task_prompt: str = DEFAULT_TASK_PROMPT
    warm_start: bool = False

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        obj = dict(obj or {})
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        gen = obj.pop("generator", None) or {}
        gknown = {f.name for f in fields(GeneratorConfig)}
        if set(gen) - gknown:
            raise ConfigError(f"unknown generator keys: {sorted(set(gen) - gknown)}")
        try:
            cfg = cls(generator=GeneratorConfig(**gen), **obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def reward_config(self) -> RewardConfig:
        w2 = 0.0 if self.mode == "tsf_ter_r1" else self.w2
        return RewardConfig(self.w1, w2, tuple(self.keywords), self.distinct_keywords)

    def dpo_config(self) -> DpoConfig:
        return DpoConfig(self.beta, self.dpo_learning_rate, self.dpo_steps_per_round)

    def forecaster_config(self, lookback: int, horizon: int, text_mode: str) -> ForecasterConfig:
        bad = set(self.forecaster) - set(DEFAULT_FORECASTER)
        if bad:
            raise ConfigError(f"unknown forecaster keys: {sorted(bad)}")
        opts = {**DEFAULT_FORECASTER, **self.forecaster}
        return ForecasterConfig(lookback=lookback, horizon=horizon, text_mode=text_mode, **opts)

    def windows_for(self, frequency: str):
        base = frequency_config(frequency)
        lookback = self.lookback or base.lookback
        horizons = tuple(self.horizons) if self.horizons else base.horizons
        return lookback, horizons

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.generator.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.generator.backend!r}")
        if self.window_stride < 1:
            raise ConfigError("window_stride must be >= 1")
        if self.horizons is not None and (not self.horizons or min(self.horizons) < 1):
            raise ConfigError("horizons must be positive")
        if self.lookback is not None and self.lookback < 1:
            raise ConfigError("lookback must be positive")
        if not self.task_prompt.strip():
            raise ConfigError("task prompt must be non-empty")
        self.reward_config()
        self.dpo_config()
        self.forecaster_config(self.lookback or 10**6, 1, "none")
        GenerationRequest("x", self.k, self.generator.temperature, self.generator.max_tokens)
        return self


def make_backend(cfg: PipelineConfig) -> Backend:
    g = cfg.generator
    if g.backend == "mock":
        return MockBackend(cfg.keywords, g.keyword_counts, g.echo_text)
    if g.backend == "toy":
        if g.toy_fillers:
            return ToyBackend(default_toy_lm(cfg.keywords, g.toy_fillers))
        return ToyBackend(default_toy_lm(cfg.keywords))
    return RemoteBackend(max_in_flight=g.workers)


# --------------------------------------------------------------------------
# state and report types


@dataclass
class Metrics:
    mse: float
    mae: float


@dataclass
class RoundState:
    round: int
    backend: Backend
    forecaster: ForecasterParams | None
    pairs: list[PreferencePair] = field(default_factory=list)
    mean_best_reward: float = float("nan")
    skipped: int = 0


@dataclass
class RoundRecord:
    round: int
    mean_best_reward: float
    pairs: int
    skipped: int


@dataclass
class HorizonResult:
    horizon: int
    mse: float
    mae: float
    rounds: list[RoundRecord] = field(default_factory=list)


@dataclass
class DomainResult:
    domain: str
    frequency: str
    lookback: int
    horizons: list[HorizonResult]

    @property
    def mse(self):
        return float(np.mean([h.mse for h in self.horizons]))

    @property
    def mae(self):
        return float(np.mean([h.mae for h in self.horizons]))


@dataclass
class Report:
    mode: str
    seed: int
    config: dict
    domains: list[DomainResult]
    units: str = "normalized"

    @property
    def mse(self):
        return float(np.mean([d.mse for d in self.domains]))

    @property
    def mae(self):
        return float(np.mean([d.mae for d in self.domains]))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "units": self.units,
            "mse": self.mse,
            "mae": self.mae,
            "domains": [
                {
                    "domain": d.domain,
                    "frequency": d.frequency,
                    "lookback": d.lookback,
                    "mse": d.mse,
                    "mae": d.mae,
                    "horizons": [asdict(h) for h in d.horizons],
                }
                for d in self.domains
            ],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, obj) -> "Report":
        domains = [
            DomainResult(
                d["domain"], d["frequency"], d["lookback"],
                [HorizonResult(h["horizon"], h["mse"], h["mae"], [RoundRecord(**r) for r in h["rounds"]])
                 for h in d["horizons"]],
            )
            for d in obj["domains"]
        ]
        return cls(obj["mode"], obj["seed"], obj["config"], domains, obj.get("units", "normalized"))


# --------------------------------------------------------------------------
# data preparation


@dataclass
class Windows:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


def prepare_windows(dataset: Dataset, lookback: int, horizon: int, cfg: PipelineConfig) -> Windows:
    """Split, normalize with train statistics, window, and attach lookback-overlapping texts."""
    segments = chronological_split(dataset.series, tuple(cfg.split_ratios))
    stats = znorm_fit(segments[0])
    out = []
    for seg in segments:
        seg = seg.with_values(znorm_apply(seg.values, stats))
        out.append([attach_texts(s, dataset.texts) for s in make_windows(seg, lookback, horizon, cfg.window_stride)])
    if not out[0] or not out[2]:
        raise DataError(
            f"{dataset.name}: too short for lookback={lookback}, horizon={horizon} "
            f"({len(out[0])} train / {len(out[2])} test windows)"
        )
    return Windows(*out)


def _prompts(samples, frequency, cfg):
    return [prompt_for_sample(s, frequency, cfg.task_prompt).rendered for s in samples]


def _requests(samples, prompts, k, cfg):
    g = cfg.generator
    return [
        GenerationRequest(p, k, g.temperature, g.max_tokens, derive_seed(cfg.seed, "gen", s.sample_id))
        for s, p in zip(samples, prompts)
    ]


def _first_candidates(backend, samples, frequency, cfg) -> list[str]:
    if not samples:
        return []
    reqs = _requests(samples, _prompts(samples, frequency, cfg), 1, cfg)
    return [c[0].body for c in generate_all(backend, reqs, cfg.generator.workers)]


def evaluate(params: ForecasterParams, samples: Sequence[Sample], texts=None) -> Metrics:
    if not samples:
        raise DataError("cannot evaluate on an empty test set")
    Y = predict_batch(params, samples, texts)
    T = np.stack([s.horizon_truth for s in samples])
    return Metrics(float(np.mean((Y - T) ** 2)), float(np.mean(np.abs(Y - T))))


# --------------------------------------------------------------------------
# one refinement round


def run_round(state: RoundState, train: Sequence[Sample], val: Sequence[Sample], frequency: str,
              fcfg: ForecasterConfig, cfg: PipelineConfig, export_dir: Path | None = None) -> RoundState:
    """Generate k candidates per training sample, score them with the current
    forecaster, pair best against worst, update the generator, and retrain
    the forecaster on the best candidates."""
    for s in train:
        if s.split != "train":
            raise DataError(f"sample {s.sample_id!r} from split {s.split!r} passed to a training round")
    rcfg = cfg.reward_config()
    r = state.round
    try:
        prompts = _prompts(train, frequency, cfg)
        cands = generate_all(state.backend, _requests(train, prompts, cfg.k, cfg), cfg.generator.workers)
        flat_samples = [s for s, cs in zip(train, cands) for _ in cs]
        flat_texts = [c.body for cs in cands for c in cs]
        preds = predict_batch(state.forecaster, flat_samples, flat_texts)
        ranked, best_texts, best_rewards = [], [], []
        pos = 0
        for s, prompt, cs in zip(train, prompts, cands):
            scored = [score_candidate(c, s.horizon_truth, preds[pos + j], rcfg) for j, c in enumerate(cs)]
            pos += len(cs)
            ranking = rank_candidates(scored) if len(scored) >= 2 else None
            best = ranking.best if ranking is not None else scored[0]
            best_texts.append(best.candidate.body)
            best_rewards.append(best.r)
            if len(scored) >= 2:
                ranked.append((s.sample_id, prompt, ranking))
        pairs, skipped = build_pairs(ranked, r)
        if cfg.k >= 2 and not pairs:
            log.warning("round %d: every ranking was degenerate; no preference pairs", r)

        # generator update: in process for the toy LM, export-only otherwise
        backend = state.backend
        if pairs and isinstance(backend, ToyBackend):
            backend = ToyBackend(train_dpo(backend.model, pairs, cfg.dpo_config()))
        if pairs and export_dir is not None:
            Path(export_dir).mkdir(parents=True, exist_ok=True)
            export_pairs(pairs, Path(export_dir) / f"pairs_round{r}.jsonl")

        val_texts = _first_candidates(state.backend, val, frequency, cfg)
        init = state.forecaster if cfg.warm_start else None
        result = train_forecaster(
            train, fcfg, derive_seed(cfg.seed, "forecaster", fcfg.horizon) % 2**32, best_texts,
            val or None, val_texts or None, init=init,
        )
    except TerError as exc:
        exc.args = (f"round {r}: {exc}",) + exc.args[1:]
        raise
    return RoundState(r, backend, result.params, pairs, float(np.mean(best_rewards)), skipped)


# --------------------------------------------------------------------------
# whole pipeline


def _text_mode(mode):
    return {"tsf_only": "none", "tsf_text": "raw"}.get(mode, "reinforced")


def run_horizon(dataset: Dataset, lookback: int, horizon: int, cfg: PipelineConfig,
                backend: Backend | None = None, export_dir=None) -> HorizonResult:
    win = prepare_windows(dataset, lookback, horizon, cfg)
    freq = dataset.series.frequency
    fseed = derive_seed(cfg.seed, "forecaster", horizon) % 2**32
    fcfg = cfg.forecaster_config(lookback, horizon, _text_mode(cfg.mode))

    if cfg.mode in ("tsf_only", "tsf_text"):
        params = train_forecaster(win.train, fcfg, fseed, val_samples=win.val or None).params
        m = evaluate(params, win.test)
        return HorizonResult(horizon, m.mse, m.mae)

    backend = backend or make_backend(cfg)
    if cfg.mode == "tsf_ter":
        tr = _first_candidates(backend, win.train, freq, cfg)
        va = _first_candidates(backend, win.val, freq, cfg)
        params = train_forecaster(win.train, fcfg, fseed, tr, win.val or None, va or None).params
        m = evaluate(params, win.test, _first_candidates(backend, win.test, freq, cfg))
        return HorizonResult(horizon, m.mse, m.mae)

    # round-0 scorer: the text-conditioned forecaster fed the original texts
    raw = [s.raw_text for s in win.train]
    raw_val = [s.raw_text for s in win.val]
    params = train_forecaster(win.train, fcfg, fseed, raw, win.val or None, raw_val or None).params
    state = RoundState(0, backend, params)
    records = []
    for r in range(1, cfg.rounds + 1):
        state = run_round(replace(state, round=r), win.train, win.val, freq, fcfg, cfg, export_dir)
        records.append(RoundRecord(r, state.mean_best_reward, len(state.pairs), state.skipped))
        log.info("%s h=%d round %d: mean best reward %.6f, %d pairs, %d skipped",
                 dataset.name, horizon, r, state.mean_best_reward, len(state.pairs), state.skipped)
    m = evaluate(state.forecaster, win.test, _first_candidates(state.backend, win.test, freq, cfg))
    return HorizonResult(horizon, m.mse, m.mae, records)


def run_pipeline(cfg: PipelineConfig, datasets, backend: Backend | None = None, export_dir=None) -> Report:
    """Run ``cfg.mode`` on every dataset and horizon and collect a :class:`Report`.

    Deterministic given ``cfg`` and the data for the mock and toy backends.
    A caller-supplied ``backend`` replaces the configured one; every horizon
    starts from it unchanged (DPO updates produce new backend objects).
    """
    cfg.validate()
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    if not datasets:
        raise DataError("no datasets given")
    plan = []
    for ds in datasets:
        lookback, horizons = cfg.windows_for(ds.series.frequency)
        for h in horizons:
            cfg.forecaster_config(lookback, h, _text_mode(cfg.mode))
        plan.append((ds, lookback, horizons))
    if cfg.mode not in ("tsf_only", "tsf_text") and backend is None:
        make_backend(cfg)  # surface backend configuration errors before any compute
    domains = []
    for ds, lookback, horizons in plan:
        results = [run_horizon(ds, lookback, h, cfg, backend, export_dir) for h in horizons]
        domains.append(DomainResult(ds.name, ds.series.frequency, lookback, results))
    return Report(cfg.mode, cfg.seed, cfg.to_dict(), domains)


# --------------------------------------------------------------------------
# report files

METRIC_COLUMNS = ("domain", "mode", "horizon", "mse", "mae")
REWARD_COLUMNS = ("domain", "horizon", "round", "mean_best_reward", "pairs", "skipped")


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def metrics_rows(report: Report):
    rows = []
    for d in report.domains:
        for h in d.horizons:
            rows.append((d.domain, report.mode, h.horizon, h.mse, h.mae))
        rows.append((d.domain, report.mode, "avg", d.mse, d.mae))
    if len(report.domains) > 1:
        rows.append(("avg", report.mode, "avg", report.mse, report.mae))
    return rows


def reward_rows(report: Report):
    return [
        (d.domain, h.horizon, r.round, r.mean_best_reward, r.pairs, r.skipped)
        for d in report.domains
        for h in d.horizons
        for r in h.rounds
    ]


def emit_report(report: Report, out_dir, figures: bool = True) -> list[Path]:
    """Write report.json, metrics.csv, rewards.csv and (optionally) figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "metrics.csv", out / "rewards.csv"]
    paths[0].write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    paths[1].write_text(_csv(metrics_rows(report), METRIC_COLUMNS), encoding="utf-8")
    paths[2].write_text(_csv(reward_rows(report), REWARD_COLUMNS), encoding="utf-8")
    if figures:
        from ter_tsf.plotting import plot_metrics, plot_rewards

        paths.append(plot_metrics(report, out / "metrics.png"))
        if reward_rows(report):
            paths.append(plot_rewards(report, out / "rewards.png"))
    return paths


def load_report(path) -> Report:
    return Report.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
