"""Command-line driver: corpus generation, base training, hotfixing, evaluation and sweeps.

Every command accepts ``--config run.json`` plus ``--set section.key=value``
overrides and writes its resolved configuration beside its outputs.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import (DegeneratePairError, ParseError, Tokenizer, build_example, load_jsonl, split_ids,
                   synth_corpus, write_jsonl)
from .evaluate import (build_report, count_outcomes, format_change, perplexity,
                       return_tasks, safe_change, task_pass_counts)
from .hotfix import LOG_FIELDS, TrainSettings, train_hotfix
from .loss import OBJECTIVES, ConfigurationError
from .model import ModelConfig, SamplerConfig, TransformerLM, train_base
from .peft import AdapterSpec, SpecError, prepare_base

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2

PAIRS_FILE, NEUTRAL_FILE, SPLIT_FILE = "pairs.jsonl", "neutral.txt", "split.json"


class UsageError(Exception):
    pass


# -- configuration -------------------------------------------------------------------

@dataclass
class BaseTraining:
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class EvalSettings:
    split: str = "test"
    workers: int = 1
    ks: list = field(default_factory=lambda: [1, 5, 10])


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    objective: str = "Dual+KL"
    training: TrainSettings = field(default_factory=TrainSettings)
    base_training: BaseTraining = field(default_factory=BaseTraining)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective: {self.objective!r} is not one of {OBJECTIVES}")

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if hasattr(v, "to_dict") else (asdict(v) if hasattr(v, "__dataclass_fields__") else v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        sections = {"model": ModelConfig, "training": TrainSettings, "base_training": BaseTraining,
                    "sampler": SamplerConfig, "evaluation": EvalSettings}
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config section(s): {sorted(unknown)}")
        kw = {}
        for name, value in d.items():
            try:
                if name in sections:
                    kw[name] = sections[name](**value)
                elif name == "adapter":
                    kw[name] = AdapterSpec.from_dict(value)
                else:
                    kw[name] = value
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"{name}: {exc}") from exc
        return cls(**kw)


def resolve_config(path: str | None, overrides: list[str]) -> RunConfig:
    d = RunConfig().to_dict()
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path}: {exc}") from exc
        for k, v in loaded.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k].update(v)
            else:
                d[k] = v
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigurationError(f"{key}: no such config section")
            node = node[p]
        node[parts[-1]] = value
    return RunConfig.from_dict(d)


def write_resolved(cfg: RunConfig, path: Path, extra: dict | None = None) -> None:
    data = dict(cfg.to_dict(), **(extra or {}))
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _require(*paths) -> None:
    for p in paths:
        if p is None or not Path(p).exists():
            raise ConfigurationError(f"input path {p} does not exist")


# -- corpus -------------------------------------------------------------------------

@dataclass
class Corpus:
    pairs: list
    neutral: list[str]
    split: dict

    def pair_split(self, name: str):
        byid = {p.pair_id: p for p in self.pairs}
        return [byid[i] for i in self.split["pairs"][name]]

    def neutral_split(self, name: str) -> list[str]:
        return [self.neutral[int(i[1:])] for i in self.split["neutral"][name]]


def load_corpus(directory: str | Path) -> Corpus:
    d = Path(directory)
    _require(d / PAIRS_FILE, d / NEUTRAL_FILE, d / SPLIT_FILE)
    pairs = load_jsonl(d / PAIRS_FILE)
    neutral = [line for line in (d / NEUTRAL_FILE).read_text().splitlines() if line.strip()]
    split = json.loads((d / SPLIT_FILE).read_text())
    return Corpus(pairs, neutral, split)


def corpus_tokenizer(corpus: Corpus) -> Tokenizer:
    texts = [p.buggy_text for p in corpus.pairs] + [p.fixed_text for p in corpus.pairs] + corpus.neutral
    return Tokenizer.from_texts(texts)


def gen_corpus(out: Path, seed: int, n_pairs: int, n_neutral: int, site_rate: float = 0.3) -> None:
    if n_pairs < 1 or n_neutral < 1:
        raise UsageError("--pairs and --neutral must be positive")
    out.mkdir(parents=True, exist_ok=True)
    pairs, neutral = synth_corpus(seed, n_pairs, n_neutral, site_rate)
    write_jsonl(out / PAIRS_FILE, pairs)
    (out / NEUTRAL_FILE).write_text("".join(t + "\n" for t in neutral))
    split = {"pairs": split_ids([p.pair_id for p in pairs], seed),
             "neutral": split_ids([f"n{i:05d}" for i in range(len(neutral))], seed + 1)}
    (out / SPLIT_FILE).write_text(json.dumps(split, indent=1, sort_keys=True) + "\n")
    (out / "gen-corpus.config.json").write_text(json.dumps(
        {"seed": seed, "pairs": n_pairs, "neutral": n_neutral, "site_rate": site_rate},
        indent=2, sort_keys=True) + "\n")


# -- base training -------------------------------------------------------------------

def base_training_corpus(corpus: Corpus, tok: Tokenizer) -> list[list[int]]:
    """Neutral training text plus the buggy version of every pair; fixed versions never appear."""
    return ([tok.encode(t) for t in corpus.neutral_split("train")]
            + [tok.encode(p.buggy_text) for p in corpus.pairs])


def train_base_model(cfg: RunConfig, corpus: Corpus) -> tuple[TransformerLM, Tokenizer, list[float]]:
    tok = corpus_tokenizer(corpus)
    if len(tok) > cfg.model.vocab_size:
        raise ConfigurationError(f"model.vocab_size {cfg.model.vocab_size} < corpus vocabulary {len(tok)}")
    model = TransformerLM(cfg.model)
    bt = cfg.base_training
    opt = T.Adam(model.params, learning_rate=bt.learning_rate)
    trace = train_base(model, base_training_corpus(corpus, tok), bt.epochs, bt.batch_size, opt, seed=bt.seed)
    return model, tok, trace


def load_base(path) -> tuple[TransformerLM, Tokenizer]:
    _require(path)
    model, meta = ckpt.load_model(path)
    if "tokenizer" not in meta:
        raise ckpt.CheckpointError(f"{path}: no tokenizer in metadata")
    return model, Tokenizer(meta["tokenizer"])


# -- hotfix ------------------------------------------------------------------------------

def examples(pairs, tok: Tokenizer):
    return [build_example(p, tok) for p in pairs]


def run_hotfix(cfg: RunConfig, base: TransformerLM, tok: Tokenizer, corpus: Corpus, on_step=None):
    train = examples(corpus.pair_split("train"), tok)
    val = examples(corpus.pair_split("validation"), tok)
    neutral = [tok.encode(t) for t in corpus.neutral_split("train")]
    return train_hotfix(base, cfg.adapter, train, cfg.objective, cfg.training, validation=val,
                        neutral=neutral, on_step=on_step)


def write_loss_log(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k])
                        for k in LOG_FIELDS})


# -- evaluation -------------------------------------------------------------------------------

def sampler_for(cfg: RunConfig, test) -> SamplerConfig:
    longest = max(len(ex.fixed_stmt) for ex in test) if test else 1
    s = cfg.sampler
    return SamplerConfig(s.temperature, s.top_k, max(s.max_new_tokens, longest + 2), s.num_samples,
                         s.stop_token, s.rng_seed, s.greedy)


@dataclass
class EvalInputs:
    test: list
    neutral: list
    tasks: list
    sampler: SamplerConfig


def eval_inputs(cfg: RunConfig, tok: Tokenizer, corpus: Corpus) -> EvalInputs:
    split = cfg.evaluation.split
    test = examples(corpus.pair_split(split), tok)
    names = corpus.split["neutral"][split]
    neutral = [tok.encode(t) for t in corpus.neutral_split(split)]
    tasks = return_tasks(neutral, tok.index["return"], ids=names) if "return" in tok.index else []
    return EvalInputs(test, neutral, tasks, sampler_for(cfg, test))


@dataclass
class SideMeasures:
    counts: object
    ppl: float
    passes: list


def measure(model, adapters, inp: EvalInputs, workers: int = 1) -> SideMeasures:
    counts = count_outcomes(model, inp.test, inp.sampler, adapters, workers=workers)
    ppl = perplexity(model, inp.neutral, adapters)
    passes = task_pass_counts(model, inp.tasks, inp.sampler, adapters)
    return SideMeasures(counts, ppl, passes)


def report_from(before: SideMeasures, after: SideMeasures, inp: EvalInputs, ks):
    return build_report(before.counts, after.counts, before.ppl, after.ppl, before.passes, after.passes,
                        inp.sampler.num_samples, ks)


def write_report(report, json_path: Path, label: str = "hotfixed") -> None:
    json_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    json_path.with_suffix(".txt").write_text(report.table(label) + "\n")


# -- sweep ------------------------------------------------------------------------------------

KL_PAIRS = (("Vanilla", "Vanilla+KL"), ("Guided", "Guided+KL"), ("Dual", "Dual+KL"))


def kl_summary(cells: dict) -> dict:
    """Mean percent change in bugs and fixes from adding the KL term, over available objective pairs."""
    bugs, fixes = [], []
    for plain, with_kl in KL_PAIRS:
        a, b = cells.get(plain), cells.get(with_kl)
        if not a or not b or a.get("status") != "ok" or b.get("status") != "ok":
            continue
        db = safe_change(a["after"]["n_buggy"], b["after"]["n_buggy"])
        df = safe_change(a["after"]["n_fixed"], b["after"]["n_fixed"])
        if db is not None:
            bugs.append(db)
        if df is not None:
            fixes.append(df)
    return {"bugs": float(np.mean(bugs)) if bugs else None, "fixes": float(np.mean(fixes)) if fixes else None,
            "bug_deltas": bugs, "fix_deltas": fixes}


def sweep_table(grid: dict, objectives, base_counts) -> str:
    head = f"{'adapter':<8} {'objective':<11} {'# bugs':>18} {'# fixes':>18} {'ppl':>8}"
    lines = [head, f"{'base':<20} {base_counts['n_buggy']:>18} {base_counts['n_fixed']:>18}"]
    for kind, row in grid["cells"].items():
        for obj in objectives:
            c = row[obj]
            if c["status"] != "ok":
                lines.append(f"{kind:<8} {obj:<11} {'failed: ' + c['error']}")
                continue
            b = f"{c['after']['n_buggy']} ({format_change(c['pct_change_bugs'])})" if c["pct_change_bugs"] is not None else str(c["after"]["n_buggy"])
            f = f"{c['after']['n_fixed']} ({format_change(c['pct_change_fixes'])})" if c["pct_change_fixes"] is not None else str(c["after"]["n_fixed"])
            lines.append(f"{kind:<8} {obj:<11} {b:>18} {f:>18} {c['ppl_after']:>8.2f}")
        s = grid["changes_by_kl"][kind]
        fmt = lambda v: "n/a" if v is None else f"{v:+.2f}%"
        lines.append(f"{kind:<8} {'KL change':<11} {fmt(s['bugs']):>18} {fmt(s['fixes']):>18}")
    return "\n".join(lines)


def run_sweep(cfg: RunConfig, base: TransformerLM, tok: Tokenizer, corpus: Corpus, kinds, objectives,
              out: Path, log=print) -> dict:
    inp = eval_inputs(cfg, tok, corpus)
    before = measure(base, None, inp, cfg.evaluation.workers)
    grid = {"adapters": list(kinds), "objectives": list(objectives),
            "base": {"counts": asdict(before.counts), "ppl": before.ppl}, "cells": {}, "changes_by_kl": {}}
    for kind in kinds:
        row = {}
        for obj in objectives:
            cell_cfg = copy.deepcopy(cfg)
            try:
                spec = AdapterSpec.from_dict(dict(cfg.adapter.to_dict(), kind=kind,
                                                  quant_bits=(cfg.adapter.quant_bits or 8) if kind == "qlora" else None))
                cell_cfg.adapter, cell_cfg.objective = spec, obj
                res = run_hotfix(cell_cfg, base, tok, corpus)
                after = measure(res.base, res.adapter, inp, cfg.evaluation.workers)
                rep = report_from(before, after, inp, cfg.evaluation.ks)
                cell = dict(rep.to_json(), status="ok", best_epoch=res.best_epoch,
                            epochs_run=len(res.epoch_seconds))
                ckpt.save_adapter(out / f"{kind}.{obj}.hfx", res.adapter)
            except Exception as exc:  # a failed cell must not sink the whole grid
                cell = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            row[obj] = cell
            log(f"{kind} {obj}: {cell.get('status')}")
        grid["cells"][kind] = row
        grid["changes_by_kl"][kind] = kl_summary(row)
    return grid


# -- argparse plumbing ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="llmhotfix", description="Train and evaluate adapter hotfixes for code models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config field (value parsed as JSON when possible)")

    g = sub.add_parser("gen-corpus", help="write a synthetic bug/fix corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--pairs", type=int, default=280)
    g.add_argument("--neutral", type=int, default=500)
    g.add_argument("--site-rate", type=float, default=0.3)
    g.add_argument("--out", required=True)

    b = sub.add_parser("train-base", help="train the base model on neutral text plus buggy code")
    common(b)
    b.add_argument("--corpus", required=True)
    b.add_argument("--out", required=True, help="base checkpoint path (.hfx)")

    h = sub.add_parser("hotfix", help="train an adapter hotfix on a frozen base")
    common(h)
    h.add_argument("--corpus", required=True)
    h.add_argument("--base", required=True)
    h.add_argument("--out", required=True, help="adapter path (.hfx)")
    h.add_argument("--objective", choices=OBJECTIVES)
    h.add_argument("--adapter", dest="kind", choices=("lora", "ia3", "prefix", "qlora"))

    e = sub.add_parser("evaluate", help="compare base and base+adapter")
    common(e)
    e.add_argument("--corpus", required=True)
    e.add_argument("--base", required=True)
    e.add_argument("--adapter")
    e.add_argument("--split", choices=("train", "validation", "test"))
    e.add_argument("--workers", type=int)
    e.add_argument("--out", required=True, help="report path (.json; a .txt table is written beside it)")

    s = sub.add_parser("sweep", help="hotfix and evaluate every adapter x objective cell")
    common(s)
    s.add_argument("--corpus", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--adapters", default="lora")
    s.add_argument("--objectives", default=",".join(OBJECTIVES))
    s.add_argument("--out", required=True, help="output directory")
    return p


def _cfg(args, **flags) -> RunConfig:
    sets = list(args.set)
    for key, value in flags.items():
        if value is not None:
            sets.append(f"{key}={json.dumps(value)}")
    return resolve_config(args.config, sets)


def _cmd_gen_corpus(args) -> None:
    gen_corpus(Path(args.out), args.seed, args.pairs, args.neutral, args.site_rate)


def _cmd_train_base(args) -> None:
    cfg = _cfg(args)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    model, tok, trace = train_base_model(cfg, corpus)
    fp = ckpt.save_model(out, model, {"tokenizer": tok.vocab})
    with open(out.with_suffix(".loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(trace, 1):
            w.writerow([i, repr(v)])
    write_resolved(cfg, out.with_suffix(".config.json"), {"corpus": str(args.corpus)})
    print(f"base checkpoint {out} fingerprint {fp}; final loss {trace[-1]:.4f}")


def _cmd_hotfix(args) -> None:
    cfg = _cfg(args, objective=args.objective, **({"adapter.kind": args.kind} if args.kind else {}))
    if cfg.adapter.kind == "qlora" and cfg.adapter.quant_bits is None:
        raise ConfigurationError("adapter.quant_bits: qlora needs 4 or 8")
    _require(args.base)
    corpus = load_corpus(args.corpus)
    base, tok = load_base(args.base)
    out = Path(args.out)
    res = run_hotfix(cfg, base, tok, corpus)
    ckpt.save_adapter(out, res.adapter)
    write_loss_log(out.with_suffix(".loss.csv"), res.log)
    write_resolved(cfg, out.with_suffix(".config.json"), {"corpus": str(args.corpus), "base": str(args.base)})
    # wall-clock is the one intentionally non-reproducible output
    out.with_suffix(".timing.json").write_text(json.dumps(
        {"epoch_seconds": res.epoch_seconds, "best_epoch": res.best_epoch}, indent=2) + "\n")
    for i, sec in enumerate(res.epoch_seconds, 1):
        v = res.val_dual[i - 1] if res.val_dual else float("nan")
        print(f"epoch {i}: {sec:.1f}s validation dual {v:.4f}")
    print(f"adapter {out} ({res.adapter.num_parameters()} parameters, best epoch {res.best_epoch})")


def _cmd_evaluate(args) -> None:
    cfg = _cfg(args, **{"evaluation.split": args.split, "evaluation.workers": args.workers})
    corpus = load_corpus(args.corpus)
    base, tok = load_base(args.base)
    adapter, after_model = None, base
    if args.adapter:
        _require(args.adapter)
        adapter = ckpt.load_adapter(args.adapter)
        after_model = prepare_base(base, adapter.spec)
        adapter.check_compatible(after_model)
    inp = eval_inputs(cfg, tok, corpus)
    before = measure(base, None, inp, cfg.evaluation.workers)
    after = measure(after_model, adapter, inp, cfg.evaluation.workers) if adapter else before
    report = report_from(before, after, inp, cfg.evaluation.ks)
    out = Path(args.out)
    write_report(report, out, "hotfixed" if adapter else "base")
    write_resolved(cfg, out.with_suffix(".config.json"),
                   {"corpus": str(args.corpus), "base": str(args.base), "adapter": args.adapter})
    print(report.table("hotfixed" if adapter else "base"))


def _cmd_sweep(args) -> None:
    cfg = _cfg(args)
    kinds = [k for k in args.adapters.split(",") if k]
    objectives = [o for o in args.objectives.split(",") if o]
    bad = [o for o in objectives if o not in OBJECTIVES]
    if bad:
        raise ConfigurationError(f"--objectives: unknown {bad}")
    corpus = load_corpus(args.corpus)
    base, tok = load_base(args.base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = run_sweep(cfg, base, tok, corpus, kinds, objectives, out)
    (out / "sweep.json").write_text(json.dumps(grid, indent=2, sort_keys=True) + "\n")
    table = sweep_table(grid, objectives, grid["base"]["counts"])
    (out / "sweep.txt").write_text(table + "\n")
    write_resolved(cfg, out / "sweep.config.json", {"corpus": str(args.corpus), "base": str(args.base),
                                                    "adapters": kinds, "objectives": objectives})
    print(table)


COMMANDS = {"gen-corpus": _cmd_gen_corpus, "train-base": _cmd_train_base, "hotfix": _cmd_hotfix,
            "evaluate": _cmd_evaluate, "sweep": _cmd_sweep}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, DegeneratePairError, ckpt.CheckpointError, ckpt.CompatibilityError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
