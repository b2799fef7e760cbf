"""Command-line entry point: ``ter-tsf <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from dataclasses import asdict
from pathlib import Path

import yaml

from ter_tsf.core import Dataset, chronological_split, load_dataset
from ter_tsf.dpo import DpoConfig, build_pairs, export_pairs, load_pairs, train_dpo
from ter_tsf.errors import ConfigError, DataError, TerError
from ter_tsf.forecaster import load_params, save_params, train_forecaster
from ter_tsf.generator import CandidateText, GenerationRequest, ToyBackend, ToyLM, default_toy_lm, derive_seed
from ter_tsf.pipeline import (
    MODES,
    PipelineConfig,
    RoundState,
    _first_candidates,
    _text_mode,
    emit_report,
    evaluate,
    load_report,
    make_backend,
    prepare_windows,
    run_pipeline,
    run_round,
)
from ter_tsf.reward import RewardConfig, ScoredCandidate, load_keywords, rank_candidates, score_candidate
from ter_tsf.synthetic import seasonal_dataset, text_signal_dataset
from ter_tsf.textualize import assemble_prompt, describe_series, prompt_for_sample, serialize_series

log = logging.getLogger("ter_tsf")


def load_config(args) -> PipelineConfig:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            raw = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
        except (ValueError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a mapping")
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        raw["mode"] = args.mode
    if getattr(args, "backend", None) is not None:
        raw.setdefault("generator", {})
        raw["generator"] = {**raw["generator"], "backend": args.backend}
    return PipelineConfig.from_dict(raw)


def load_datasets(args) -> list[Dataset]:
    if getattr(args, "synthetic", None):
        maker = {"text_signal": text_signal_dataset, "seasonal": seasonal_dataset}[args.synthetic]
        return [maker(seed=args.data_seed)]
    series = args.series or []
    if not series:
        raise ConfigError("give --series (and optionally --texts) or --synthetic")
    texts = args.texts or []
    if texts and len(texts) != len(series):
        raise ConfigError("--texts must be given once per --series")
    freqs = args.frequency or ["monthly"]
    if len(freqs) == 1:
        freqs = freqs * len(series)
    if len(freqs) != len(series):
        raise ConfigError("--frequency must be given once or once per --series")
    out = []
    for i, path in enumerate(series):
        s, recs = load_dataset(path, texts[i] if texts else None, frequency=freqs[i])
        out.append(Dataset(s, recs))
    return out


def _read_jsonl(path):
    rows = []
    src = sys.stdin if str(path) == "-" else open(path, encoding="utf-8")
    with src as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
    return rows


def _write_lines(lines, out, name):
    text = "".join(json.dumps(l, ensure_ascii=False) + "\n" for l in lines)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _keywords(args, cfg):
    return load_keywords(args.keywords) if getattr(args, "keywords", None) else tuple(cfg.keywords)


def _toy_model(path, cfg):
    if path:
        return ToyLM.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    return default_toy_lm(cfg.keywords)


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg):
    out = []
    for ds in load_datasets(args):
        tr, va, te = chronological_split(ds.series, tuple(cfg.split_ratios))
        out.append({
            "domain": ds.name,
            "frequency": ds.series.frequency,
            "length": len(ds.series),
            "start": ds.series.timestamps[0].isoformat(),
            "end": ds.series.timestamps[-1].isoformat(),
            "texts": len(ds.texts),
            "split": [len(tr), len(va), len(te)],
        })
    _write_lines(out, args.out, "ingest.jsonl")


def cmd_serialize(args, cfg):
    if args.values:
        values = [float(v) for v in args.values.replace(",", " ").split()]
        prompt = assemble_prompt(serialize_series(values), describe_series(values, args.frequency and args.frequency[0]),
                                 [], cfg.task_prompt)
    else:
        ds = load_datasets(args)[0]
        lookback, horizons = cfg.windows_for(ds.series.frequency)
        win = prepare_windows(ds, lookback, horizons[0], cfg)
        sample = win.train[args.index]
        prompt = prompt_for_sample(sample, ds.series.frequency, cfg.task_prompt)
    sys.stdout.write(prompt.rendered + "\n")


def cmd_generate(args, cfg):
    prompt = args.prompt if args.prompt is not None else Path(args.prompt_file).read_text(encoding="utf-8")
    backend = ToyBackend(_toy_model(args.toy_model, cfg)) if cfg.generator.backend == "toy" else make_backend(cfg)
    req = GenerationRequest(prompt, args.k or cfg.k, cfg.generator.temperature, cfg.generator.max_tokens, cfg.seed)
    cands = backend.generate(req)
    _write_lines([{"body": c.body, "backend_id": c.backend_id, "generation_index": c.generation_index}
                  for c in cands], args.out, "candidates.jsonl")


def _scored_from_row(row, rcfg):
    cand = CandidateText(row["body"], row.get("backend_id", "external"), int(row.get("generation_index", 0)))
    return score_candidate(cand, row["truth"], row["prediction"], rcfg)


def cmd_score(args, cfg):
    rcfg = RewardConfig(cfg.w1, cfg.reward_config().w2, _keywords(args, cfg), cfg.distinct_keywords)
    out = []
    for row in _read_jsonl(args.candidates):
        try:
            sc = _scored_from_row(row, rcfg)
        except KeyError as exc:
            raise DataError(f"candidate row missing field {exc}") from None
        out.append({**row, "r1": sc.r1, "r2": sc.r2, "r": sc.r})
    _write_lines(out, args.out, "scored.jsonl")


def cmd_pair(args, cfg):
    groups = defaultdict(list)
    prompts = {}
    for row in _read_jsonl(args.scored):
        sid = row.get("sample_id", "")
        prompts.setdefault(sid, row.get("prompt", ""))
        cand = CandidateText(row["body"], row.get("backend_id", "external"), int(row.get("generation_index", 0)))
        groups[sid].append(ScoredCandidate(cand, row["r1"], row["r2"], row["r"]))
    ranked = [(sid, prompts[sid], rank_candidates(g) if len(g) >= 2 else None) for sid, g in groups.items()]
    pairs, skipped = build_pairs(ranked, args.round)
    log.info("%d pairs, %d skipped", len(pairs), skipped)
    _write_pairs(pairs, args.out)


def _write_pairs(pairs, out):
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        n = export_pairs(pairs, Path(out) / "pairs.jsonl")
        log.info("wrote %d pairs to %s", n, Path(out) / "pairs.jsonl")
    else:
        for p in pairs:
            sys.stdout.write(json.dumps(asdict(p), ensure_ascii=False) + "\n")


def cmd_train_forecaster(args, cfg):
    ds = load_datasets(args)[0]
    lookback, horizons = cfg.windows_for(ds.series.frequency)
    horizon = args.horizon or horizons[0]
    win = prepare_windows(ds, lookback, horizon, cfg)
    mode = _text_mode(cfg.mode)
    fcfg = cfg.forecaster_config(lookback, horizon, mode)
    texts = val_texts = None
    if mode == "reinforced":
        backend = make_backend(cfg)
        texts = _first_candidates(backend, win.train, ds.series.frequency, cfg)
        val_texts = _first_candidates(backend, win.val, ds.series.frequency, cfg) or None
    res = train_forecaster(win.train, fcfg, cfg.seed, texts, win.val or None, val_texts)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = save_params(res.params, out / "forecaster.json")
    print(json.dumps({"checkpoint": str(path), "best_epoch": res.best_epoch, "steps": res.steps,
                      "val_mse": min(res.val_losses) if res.val_losses else None}))


def cmd_evaluate(args, cfg):
    params = load_params(args.checkpoint)
    ds = load_datasets(args)[0]
    c = params.config
    win = prepare_windows(ds, c.lookback, c.horizon, cfg)
    texts = None
    if c.text_mode == "reinforced":
        texts = _first_candidates(make_backend(cfg), win.test, ds.series.frequency, cfg)
    m = evaluate(params, win.test, texts)
    print(json.dumps({"domain": ds.name, "horizon": c.horizon, "text_mode": c.text_mode,
                      "mse": m.mse, "mae": m.mae, "units": "normalized"}))


def cmd_train_dpo(args, cfg):
    policy = _toy_model(args.toy_model, cfg)
    pairs = load_pairs(args.pairs)
    if not pairs:
        raise DataError(f"{args.pairs}: no preference pairs")
    dcfg = DpoConfig(cfg.beta, args.lr if args.lr is not None else cfg.dpo_learning_rate,
                     args.steps if args.steps is not None else cfg.dpo_steps_per_round)
    policy = train_dpo(policy, pairs, dcfg)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "toy_lm.json").write_text(json.dumps(policy.to_dict()) + "\n", encoding="utf-8")


def cmd_export_pairs(args, cfg):
    """One scoring round on the training split; pairs written for an external trainer."""
    ds = load_datasets(args)[0]
    lookback, horizons = cfg.windows_for(ds.series.frequency)
    horizon = args.horizon or horizons[0]
    win = prepare_windows(ds, lookback, horizon, cfg)
    fcfg = cfg.forecaster_config(lookback, horizon, "reinforced")
    fseed = derive_seed(cfg.seed, "forecaster", horizon) % 2**32
    params = train_forecaster(win.train, fcfg, fseed, [s.raw_text for s in win.train],
                              win.val or None, [s.raw_text for s in win.val] or None).params
    state = run_round(RoundState(1, make_backend(cfg), params), win.train, win.val,
                      ds.series.frequency, fcfg, cfg)
    _write_pairs(state.pairs, args.out)


def cmd_run(args, cfg):
    datasets = load_datasets(args)
    report = run_pipeline(cfg, datasets, export_dir=args.out if args.out and args.export_pairs else None)
    out = Path(args.out or "results")
    paths = emit_report(report, out, figures=not args.no_figures)
    for p in paths:
        print(p)


def cmd_report(args, cfg):
    report = load_report(args.report)
    out = Path(args.out or Path(args.report).parent)
    for p in emit_report(report, out, figures=not args.no_figures):
        print(p)


# --------------------------------------------------------------------------


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="pipeline config file (.json or .yaml)")
    p.add_argument("--seed", type=int, default=d, help="master seed")
    p.add_argument("--mode", choices=MODES, default=d)
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--backend", choices=("mock", "toy", "remote"), default=d)
    p.add_argument("-v", "--verbose", action="store_true", default=d)


def _data_flags(p):
    p.add_argument("--series", action="append", help="timestamp,value CSV (repeatable)")
    p.add_argument("--texts", action="append", help="text records JSONL, one per --series")
    p.add_argument("--frequency", action="append", choices=("daily", "weekly", "monthly"))
    p.add_argument("--synthetic", choices=("text_signal", "seasonal"), help="use a built-in synthetic dataset")
    p.add_argument("--data-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ter-tsf", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help, data=False):
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        if data:
            _data_flags(p)
        p.set_defaults(func=fn)
        return p

    add("ingest", cmd_ingest, "parse datasets and print a summary", data=True)
    p = add("serialize", cmd_serialize, "render the generator prompt for a window", data=True)
    p.add_argument("--values", help="serialize these numbers instead of a dataset window")
    p.add_argument("--index", type=int, default=0, help="training window index")
    p = add("generate", cmd_generate, "generate candidate texts for a prompt")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--prompt")
    g.add_argument("--prompt-file")
    p.add_argument("--k", type=int)
    p.add_argument("--toy-model", help="toy LM JSON (toy backend)")
    p = add("score", cmd_score, "score candidates (JSONL with body, truth, prediction)")
    p.add_argument("--candidates", required=True)
    p.add_argument("--keywords", help="keyword file, one phrase per line")
    p = add("pair", cmd_pair, "turn scored candidates into preference pairs")
    p.add_argument("--scored", required=True)
    p.add_argument("--round", type=int, default=1)
    p = add("train-forecaster", cmd_train_forecaster, "train and checkpoint a forecaster", data=True)
    p.add_argument("--horizon", type=int)
    p = add("train-dpo", cmd_train_dpo, "DPO-train the toy LM on a pairs file")
    p.add_argument("--pairs", required=True)
    p.add_argument("--toy-model")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p = add("export-pairs", cmd_export_pairs, "run one scoring round and export preference pairs", data=True)
    p.add_argument("--horizon", type=int)
    p = add("run", cmd_run, "run the full pipeline and write a report", data=True)
    p.add_argument("--export-pairs", action="store_true", help="also write per-round pairs JSONL")
    p.add_argument("--no-figures", action="store_true")
    p = add("evaluate", cmd_evaluate, "evaluate a forecaster checkpoint on the test split", data=True)
    p.add_argument("--checkpoint", required=True)
    p = add("report", cmd_report, "re-render CSVs and figures from report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--no-figures", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        args.func(args, cfg)
    except TerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
