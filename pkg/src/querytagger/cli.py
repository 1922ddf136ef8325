"""Command-line entry point.

Subcommands: gen-data, weak-label, train, evaluate, ablate, prompt-eval.

Settings come from a flat config file of dotted ``key = value`` lines
(values are JSON literals, bare words are strings), overridden by
``--set key=value`` and then by the dedicated flags. Unknown keys are
rejected before any work starts.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any

from . import __version__
from .ablation import AXES, Sweep, cell_name, cross_product, run_ablation
from .adversarial import PerturbationConfig
from .corpus import (GenConfig, LabelScheme, Lexicon, generate_synthetic_corpus,
                     read_jsonl, write_jsonl)
from .evaluation import SpanReport, format_table, span_f1
from .model import load_checkpoint
from .training import (Corpora, DataContext, PipelineConfig, StageConfig, predict_tags,
                       run_pipeline)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DATA_FILES = ("unlabeled", "weak", "strong", "test")


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 1."""


# ------------------------------------------------------------------ config

def _stage_keys(prefix: str, stage: StageConfig) -> dict[str, Any]:
    skip = {"stage", "seed", "title_count", "perturbation"}
    return {f"{prefix}.{f.name}": getattr(stage, f.name)
            for f in dataclasses.fields(stage) if f.name not in skip}


def default_settings() -> dict[str, Any]:
    s: dict[str, Any] = {"seed": 0}
    gen = GenConfig()
    s.update({f"gen.{f.name}": getattr(gen, f.name)
              for f in dataclasses.fields(gen) if f.name != "seed"})
    pipe = PipelineConfig()
    s.update({f"pipeline.{f.name}": getattr(pipe, f.name) for f in dataclasses.fields(pipe)
              if f.name not in ("seed", "stage1", "stage2", "stage3")})
    s.update(_stage_keys("stage1", pipe.stage1))
    s.update(_stage_keys("stage2", pipe.stage2))
    s.update(_stage_keys("stage3", pipe.stage3))
    adv = PerturbationConfig()
    s.update({f"adv.{k}": v for k, v in adv.to_dict().items()})
    s.update({
        "weak.strategy": "cot", "weak.demo_count": 3, "weak.polarity": "+",
        "weak.title_count": 3, "weak.client": "mock", "weak.workers": 4,
        "weak.max_rejection": 0.2, "weak.limit": None, "weak.embedder": "hash",
        "weak.zero_shot_error": 0.12, "weak.demo_error": 0.05, "weak.flip_noise": 0.0,
        "weak.malformed_rate": 0.0, "weak.max_retries": 3,
        "ablate.seeds": [0, 1, 2, 3, 4], "ablate.pretrain": None, "ablate.weak": None,
        "ablate.mode": None, "ablate.k": None, "ablate.jobs": 1,
    })
    return s


def _coerce(key: str, value, default):
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            if default is not None:
                raise UsageError(f"{key}: cannot parse {value!r}") from None
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        return str(value)
    if isinstance(default, (list, dict)) and not isinstance(value, type(default)):
        raise UsageError(f"{key}: expected a {type(default).__name__}, got {value!r}")
    return value


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, Any]:
    """``key = value`` per line; ``#`` starts a comment line."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise UsageError(f"{origin}:{lineno}: empty key")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


class RunConfig:
    """Validated flat settings for one invocation."""

    def __init__(self, overrides: dict[str, Any] | None = None):
        self.values = default_settings()
        for k, v in (overrides or {}).items():
            self.set(k, v)

    def set(self, key: str, value):
        if key not in self.values:
            raise UsageError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value, default_settings()[key])

    def __getitem__(self, key):
        return self.values[key]

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def gen_config(self) -> GenConfig:
        return GenConfig.from_dict({**self.section("gen"), "seed": self["seed"]})

    def perturbation(self) -> PerturbationConfig:
        return PerturbationConfig(**self.section("adv"))

    def pipeline_config(self) -> PipelineConfig:
        stages = {}
        for name, tag in (("stage1", "I"), ("stage2", "II"), ("stage3", "III")):
            stages[name] = StageConfig(stage=tag, perturbation=self.perturbation(),
                                       **self.section(name))
        return PipelineConfig(seed=self["seed"], **self.section("pipeline"), **stages)

    def validate(self):
        try:
            self.gen_config()
            self.pipeline_config()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from None

    def to_dict(self):
        return dict(self.values)


# --------------------------------------------------------------- artifacts

def _count_lines(path) -> int:
    with open(path, "rb") as f:
        return sum(1 for line in f if line.strip())


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, cfg: RunConfig, files: dict[str, str], extra=None):
    """``manifest.json``: command, settings, and per-file line count and hash."""
    entries = {}
    for name, path in sorted(files.items()):
        entries[name] = {"path": os.path.relpath(path, out_dir), "lines": _count_lines(path),
                         "sha256": _sha256(path)}
    manifest = {"command": command, "version": __version__, "config": cfg.to_dict(),
                "files": entries, **(extra or {})}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _need_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_scheme(data_dir) -> LabelScheme:
    path = os.path.join(data_dir, "scheme.json")
    if os.path.isfile(path):
        with open(path, encoding="utf-8") as f:
            return LabelScheme.from_dict(json.load(f))
    return LabelScheme()


def load_corpora(data_dir, weak_file=None, need=DATA_FILES) -> Corpora:
    sets = {}
    for name in DATA_FILES:
        path = weak_file if (name == "weak" and weak_file) else os.path.join(data_dir, f"{name}.jsonl")
        if name in need:
            sets[name] = read_jsonl(_need_file(path, f"{name} dataset"))
        else:
            sets[name] = read_jsonl(path) if os.path.isfile(path) else []
    return Corpora(sets["unlabeled"], sets["weak"], sets["strong"], sets["test"],
                   _load_scheme(data_dir))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: RunConfig) -> int:
    corpus = generate_synthetic_corpus(cfg.gen_config())
    os.makedirs(args.out, exist_ok=True)
    files, counts = {}, {}
    for name in DATA_FILES:
        path = os.path.join(args.out, f"{name}.jsonl")
        counts[name] = write_jsonl(getattr(corpus, name), path)
        files[name] = path
    lex_path = os.path.join(args.out, "lexicon.json")
    _write_json(lex_path, corpus.lexicon.to_dict())
    scheme_path = os.path.join(args.out, "scheme.json")
    _write_json(scheme_path, corpus.scheme.to_dict())
    write_manifest(args.out, "gen-data", cfg, files, {"counts": counts, "seed": cfg["seed"]})
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def _strategy(cfg: RunConfig, name=None):
    from .weak import PromptStrategy
    try:
        return PromptStrategy(name or cfg["weak.strategy"], cfg["weak.demo_count"],
                              cfg["weak.polarity"], cfg["weak.title_count"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _client(cfg: RunConfig, data_dir, scheme):
    from .weak import LabelerError, MockLabeler, RemoteLabeler
    kind = cfg["weak.client"]
    if kind == "mock":
        with open(_need_file(os.path.join(data_dir, "lexicon.json"), "lexicon"),
                  encoding="utf-8") as f:
            lex = Lexicon.from_dict(json.load(f))
        return MockLabeler(lex, scheme, cfg["weak.zero_shot_error"], cfg["weak.demo_error"],
                           cfg["weak.flip_noise"], cfg["weak.malformed_rate"], cfg["seed"])
    if kind == "remote":
        try:
            return RemoteLabeler()
        except LabelerError as exc:
            raise UsageError(str(exc)) from None
    raise UsageError(f"weak.client must be 'mock' or 'remote', got {kind!r}")


def _embedder(cfg: RunConfig, args):
    from .weak import hashed_embedder, model_embedder
    if cfg["weak.embedder"] == "model":
        if not getattr(args, "checkpoint", None):
            raise UsageError("weak.embedder = model needs --checkpoint")
        ck = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
        return model_embedder(ck.model, ck.vocab)
    return hashed_embedder(seed=cfg["seed"])


def cmd_weak_label(args, cfg: RunConfig) -> int:
    from .weak import DemonstrationPool, PromptCache, generate_weak_labels
    strategy = _strategy(cfg)
    scheme = _load_scheme(args.data)
    source = args.input or os.path.join(args.data, "unlabeled.jsonl")
    dataset = read_jsonl(_need_file(source, "input dataset"))
    if cfg["weak.limit"] is not None:
        dataset = dataset[:cfg["weak.limit"]]
    if strategy.kind == "cot" and any(not ex.titles for ex in dataset):
        raise UsageError("--strategy cot needs search titles on every input example")
    pool = None
    if strategy.uses_demos:
        pool_examples = read_jsonl(_need_file(os.path.join(args.data, "strong.jsonl"),
                                              "demonstration pool (strong.jsonl)"))
        pool = DemonstrationPool.build(pool_examples, _embedder(cfg, args))
    embed = _embedder(cfg, args) if strategy.kind == "dynamic" else None
    os.makedirs(args.out, exist_ok=True)
    cache = PromptCache(os.path.join(args.out, "prompt_cache.jsonl"))
    client = _client(cfg, args.data, scheme)
    labeled, stats = generate_weak_labels(dataset, strategy, client, scheme, pool, embed, cache,
                                          workers=cfg["weak.workers"],
                                          max_retries=cfg["weak.max_retries"])
    out_path = os.path.join(args.out, "weak_llm.jsonl")
    write_jsonl(labeled, out_path)
    report = {**stats.to_dict(), "strategy": strategy.name, "input": os.path.abspath(source),
              "max_rejection": cfg["weak.max_rejection"]}
    rej_path = os.path.join(args.out, "rejection.json")
    _write_json(rej_path, report)
    write_manifest(args.out, "weak-label", cfg, {"weak": out_path},
                   {"rejection_rate": stats.rejection_rate})
    print(f"labeled {stats.labeled}/{stats.total} rejection_rate={stats.rejection_rate:.4f}")
    if stats.rejection_rate > cfg["weak.max_rejection"]:
        print(f"rejection rate above threshold {cfg['weak.max_rejection']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    pcfg = cfg.pipeline_config()
    need = [n for n, on in (("unlabeled", not pcfg.skip_stage1), ("weak", not pcfg.skip_stage2),
                            ("strong", not (pcfg.skip_stage2 and pcfg.skip_stage3)),
                            ("test", True)) if on]
    corpora = load_corpora(args.data, args.weak, need)
    result = run_pipeline(corpora, pcfg, run_dir=args.out)
    files = {f"stage_{s}": r.checkpoint for s, r in result.reports.items() if r.checkpoint}
    write_manifest(args.out, "train", cfg, {
        "metrics": os.path.join(args.out, "metrics.json"),
        "metrics_tsv": os.path.join(args.out, "metrics.tsv"),
        "report": os.path.join(args.out, "report.json")},
        {"checkpoints": {k: os.path.basename(v) for k, v in files.items()}})
    if result.test is not None:
        print(f"test f1={result.test.f1:.4f} brand_f1={result.test.category_f1('Brand'):.4f}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    gold = read_jsonl(_need_file(args.gold, "gold dataset"))
    if any(ex.tags is None for ex in gold):
        raise UsageError(f"{args.gold}: every example needs gold tags")
    if args.predictions:
        pred_ex = read_jsonl(_need_file(args.predictions, "prediction file"))
        by_query: dict[tuple, list] = {}
        for ex in pred_ex:
            by_query.setdefault(tuple(ex.query), []).append(ex.tags)
        pred = []
        for ex in gold:
            options = by_query.get(tuple(ex.query))
            if not options or options[0] is None:
                raise UsageError(f"no tagged prediction for query {' '.join(ex.query)!r}")
            pred.append(options.pop(0))
        scheme = _load_scheme(os.path.dirname(args.gold))
    elif args.checkpoint:
        ck = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
        if ck.vocab is None or ck.scheme is None:
            raise UsageError(f"{args.checkpoint}: checkpoint lacks vocabulary or label scheme")
        scheme = ck.scheme
        k = cfg["pipeline.title_count"]
        pred = predict_tags(ck.model, gold, DataContext(ck.vocab, scheme, ck.model.config.max_seq_len), k)
    else:
        raise UsageError("evaluate needs --checkpoint or --predictions")
    report = span_f1([ex.tags for ex in gold], pred, scheme.categories)
    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, "report.json")
    with open(json_path, "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    table_path = os.path.join(args.out, "report.txt")
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(format_table({args.name: report}) + "\n")
    write_manifest(args.out, "evaluate", cfg, {"report": json_path, "table": table_path})
    print(format_table({args.name: report}))
    return EXIT_OK


def _axes(cfg: RunConfig) -> dict[str, list]:
    axes = {}
    for a in AXES:
        v = cfg[f"ablate.{a}"]
        if v is None:
            continue
        vals = v if isinstance(v, list) else [v]
        if a in ("pretrain", "weak"):
            vals = [x if isinstance(x, bool) else str(x).lower() in ("on", "true", "1", "yes")
                    for x in vals]
        if a == "k":
            vals = [int(x) for x in vals]
        axes[a] = vals
    return axes


def _ablate_seed(data_dir, weak_file, pcfg, cells, seed):
    corpora = load_corpora(data_dir, weak_file, ("strong", "test"))
    return run_ablation(corpora, pcfg, cells, [seed]).results


def cmd_ablate(args, cfg: RunConfig) -> int:
    pcfg = cfg.pipeline_config()
    cells = cross_product(_axes(cfg)) or [{}]
    seeds = list(cfg["ablate.seeds"])
    jobs = max(1, int(cfg["ablate.jobs"]))
    load_corpora(args.data, args.weak, ("strong", "test"))  # fail fast on missing files
    sweep = Sweep()
    if jobs == 1:
        for seed in seeds:
            sweep.results += _ablate_seed(args.data, args.weak, pcfg, cells, seed)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for res in ex.map(_ablate_seed, *zip(*[(args.data, args.weak, pcfg, cells, s)
                                                   for s in seeds])):
                sweep.results += res
    os.makedirs(args.out, exist_ok=True)
    table = os.path.join(args.out, "sweep.tsv")
    with open(table, "w", encoding="utf-8") as f:
        f.write(sweep.to_tsv())
    files = {"sweep": table}
    if "k" in _axes(cfg):
        series = os.path.join(args.out, "title_series.tsv")
        with open(series, "w", encoding="utf-8") as f:
            f.write(sweep.title_series())
        files["title_series"] = series
    runs = os.path.join(args.out, "runs.tsv")
    with open(runs, "w", encoding="utf-8") as f:
        f.write("cell\tseed\tf1\tbrand_f1\tstatus\n")
        for r in sweep.results:
            status = "ok" if r.error is None else "failed: " + r.error.splitlines()[0]
            f.write(f"{cell_name(r.cell)}\t{r.seed}\t{r.f1}\t{r.brand_f1}\t{status}\n")
    files["runs"] = runs
    write_manifest(args.out, "ablate", cfg, files, {"cells": len(cells), "seeds": seeds})
    print(sweep.to_tsv(), end="")
    failed = sum(r.error is not None for r in sweep.results)
    return EXIT_RUNTIME if failed == len(sweep.results) else EXIT_OK


def cmd_prompt_eval(args, cfg: RunConfig) -> int:
    from .weak import DemonstrationPool, PromptCache, evaluate_prompt_strategy
    scheme = _load_scheme(args.data)
    test = read_jsonl(_need_file(args.input or os.path.join(args.data, "test.jsonl"), "test set"))
    if cfg["weak.limit"] is not None:
        test = test[:cfg["weak.limit"]]
    pool_ex = read_jsonl(_need_file(os.path.join(args.data, "strong.jsonl"), "strong set"))
    embed = _embedder(cfg, args)
    pool = DemonstrationPool.build(pool_ex, embed)
    client = _client(cfg, args.data, scheme)
    names = args.strategies.split(",")
    rows: dict[str, SpanReport] = {}
    os.makedirs(args.out, exist_ok=True)
    cache = PromptCache(os.path.join(args.out, "prompt_cache.jsonl"))
    for name in names:
        polarity = None
        if ":" in name:
            name, polarity = name.split(":", 1)
        st = _strategy(cfg, name)
        if polarity:
            st = dataclasses.replace(st, polarity=polarity)
        rep, _ = evaluate_prompt_strategy(st, test, client, scheme, pool, embed, cache,
                                          workers=cfg["weak.workers"])
        rows[st.name] = rep
    tsv = os.path.join(args.out, "prompt_eval.tsv")
    with open(tsv, "w", encoding="utf-8") as f:
        f.write("strategy\tbrand_f1\toverall_f1\trejection_rate\n")
        for name, rep in rows.items():
            f.write(f"{name}\t{rep.category_f1('Brand'):.6f}\t{rep.f1:.6f}\t"
                    f"{rep.extra.get('rejection_rate', 0.0):.6f}\n")
    write_manifest(args.out, "prompt-eval", cfg, {"table": tsv})
    print(format_table(rows))
    return EXIT_OK


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


FLAG_KEYS = {
    "adv_epsilon": "adv.epsilon", "adv_eta": "adv.eta", "adv_steps": "adv.steps",
    "adv_norm": "adv.norm", "k": "pipeline.title_count", "mode": "stage3.mode",
    "strategy": "weak.strategy", "client": "weak.client", "limit": "weak.limit",
    "max_rejection": "weak.max_rejection", "jobs": "ablate.jobs", "seeds": "ablate.seeds",
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="querytagger", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat 'key = value' settings file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-data", help="write the synthetic corpus as JSONL")
    common(g)

    w = sub.add_parser("weak-label", help="label queries with a prompt strategy")
    common(w)
    w.add_argument("--data", required=True, help="directory from gen-data")
    w.add_argument("--input", help="dataset to label (default: <data>/unlabeled.jsonl)")
    w.add_argument("--strategy", help="prompting | demonstration | dynamic | cot")
    w.add_argument("--client", choices=["mock", "remote"])
    w.add_argument("--limit", type=int, help="label only the first N examples")
    w.add_argument("--max-rejection", type=float)
    w.add_argument("--checkpoint", help="model whose token embeddings drive retrieval")

    t = sub.add_parser("train", help="run the staged training pipeline")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--weak", help="weak-label file replacing <data>/weak.jsonl")
    for i in (1, 2, 3):
        t.add_argument(f"--skip-stage{i}", action="store_true")
    t.add_argument("--k", type=int, help="number of search titles per query")
    t.add_argument("--mode", choices=["vanilla", "virtual", "adversarial"])
    t.add_argument("--adv-epsilon", type=float)
    t.add_argument("--adv-eta", type=float)
    t.add_argument("--adv-steps", type=int)
    t.add_argument("--adv-norm", choices=["l2", "linf"])

    e = sub.add_parser("evaluate", help="span F1 of a checkpoint or a prediction file")
    common(e)
    e.add_argument("--gold", required=True, help="JSONL with gold tags")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="JSONL with predicted tags")
    e.add_argument("--k", type=int)
    e.add_argument("--name", default="model", help="row label in the table")

    a = sub.add_parser("ablate", help="sweep pipeline variants over seeds")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--weak")
    a.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2",
                   help=f"sweep axis, NAME in {', '.join(AXES)}")
    a.add_argument("--seeds", help="comma-separated seeds")
    a.add_argument("--jobs", type=int)
    a.add_argument("--adv-epsilon", type=float)
    a.add_argument("--adv-eta", type=float)
    a.add_argument("--adv-steps", type=int)
    a.add_argument("--adv-norm", choices=["l2", "linf"])

    q = sub.add_parser("prompt-eval", help="score prompt strategies on gold data")
    common(q)
    q.add_argument("--data", required=True)
    q.add_argument("--input", help="gold dataset (default: <data>/test.jsonl)")
    q.add_argument("--strategies", default="prompting,demonstration,dynamic:+,cot")
    q.add_argument("--client", choices=["mock", "remote"])
    q.add_argument("--limit", type=int)
    q.add_argument("--checkpoint")
    return p


def resolve_config(args) -> RunConfig:
    overrides: dict[str, Any] = {}
    if args.config:
        with open(_need_file(args.config, "config file"), encoding="utf-8") as f:
            overrides.update(parse_config_text(f.read(), args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.update(parse_config_text(item, "--set"))
    if args.seed is not None:
        overrides["seed"] = args.seed
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is None:
            continue
        if attr == "seeds":
            v = [int(x) for x in v.split(",") if x]
        overrides[key] = v
    for i in (1, 2, 3):
        if getattr(args, f"skip_stage{i}", False):
            overrides[f"pipeline.skip_stage{i}"] = True
    for spec in getattr(args, "axis", []):
        name, _, vals = spec.partition("=")
        if name not in AXES or not vals:
            raise UsageError(f"--axis expects NAME=V1,V2 with NAME in {AXES}, got {spec!r}")
        items = vals.split(",")
        overrides[f"ablate.{name}"] = items if name == "mode" else [json.loads(x) if x.isdigit() else x for x in items]
    cfg = RunConfig(overrides)
    cfg.validate()
    return cfg


COMMANDS = {"gen-data": cmd_gen_data, "weak-label": cmd_weak_label, "train": cmd_train,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate, "prompt-eval": cmd_prompt_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"querytagger {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - stable exit code for any runtime failure
        print(f"querytagger {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
