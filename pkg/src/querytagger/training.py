"""Three-stage training and the semi-supervised baselines.

Stage I continues masked-token pretraining on unlabeled queries, Stage II
trains the tagger on weak labels with early stopping on a gold dev set, and
Stage III fine-tunes on strong labels with an optional perturbation term.

Every trainer draws randomness from named child streams of its stage seed:
``batches`` (epoch order), ``dropout`` and ``mlm`` per step, and
``perturb`` per step. Arms that differ only in the loss therefore see the
same batches and dropout masks.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine as E
from .adversarial import (PerturbationConfig, find_adversarial_perturbation, frozen,
                          regularized_objective, sym_kl)
from .corpus.augment import collate, encode_example, mask_batch
from .corpus.schema import IGNORE_INDEX, LabelScheme, QueryExample, Vocabulary, repair_bio
from .evaluation import SpanReport, span_f1
from .model import (DropoutPlan, ModelConfig, TaggerModel, masked_cross_entropy,
                    save_checkpoint, supervised_loss)

MODES = ("vanilla", "virtual", "adversarial")
SCHEDULES = ("constant", "linear")


@dataclass
class StageConfig:
    stage: str = "III"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    # "linear" decays the rate to zero over the planned epochs
    lr_schedule: str = "linear"
    patience: int = 2
    seed: int = 0
    title_count: int = 3
    mlm_prob: float = 0.15
    mode: str = "adversarial"
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.stage not in ("I", "II", "III"):
            raise ValueError(f"stage must be I, II or III, got {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1, lr > 0")
        if self.stage == "II" and self.patience < 1:
            raise ValueError("stage II needs patience >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        if self.title_count < 0:
            raise ValueError("title_count must be >= 0")
        if isinstance(self.perturbation, dict):
            self.perturbation = PerturbationConfig(**self.perturbation)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["perturbation"] = self.perturbation.to_dict()
        return d


@dataclass
class TrainReport:
    stage: str
    train_loss: list[float] = field(default_factory=list)
    dev_f1: list[float] = field(default_factory=list)
    dev_brand_f1: list[float] = field(default_factory=list)
    extra: dict[str, list[float]] = field(default_factory=dict)
    stop_epoch: int = 0
    best_epoch: int = 0
    wall_time: float = 0.0
    checkpoint: str | None = None

    def to_dict(self, include_time: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not include_time:
            d.pop("wall_time")
            d.pop("checkpoint")
        return d


@dataclass
class DataContext:
    """What turns examples into model input."""

    vocab: Vocabulary
    scheme: LabelScheme
    max_len: int = 64

    def encode(self, examples: Sequence[QueryExample], k: int):
        return [encode_example(ex, self.vocab, self.scheme, k, self.max_len) for ex in examples]


def _batches(n: int, batch_size: int, rng: E.Rng | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _set_rate(opt, cfg: StageConfig, epoch: int, step: int, per_epoch: int) -> None:
    if cfg.lr_schedule == "constant":
        opt.lr = cfg.lr
        return
    done = epoch * per_epoch + step
    opt.lr = cfg.lr * (1.0 - done / max(1, cfg.epochs * per_epoch))


def _step(opt, loss):
    opt.zero_grad()
    E.backward(loss)
    opt.step()


# --------------------------------------------------------------- prediction

def predict_tags(model: TaggerModel, examples: Sequence[QueryExample], ctx: DataContext,
                 k: int, batch_size: int = 128) -> list[list[str]]:
    """Argmax BIO tags over the query tokens of each example (BIO-repaired)."""
    encoded = ctx.encode(examples, k)
    out: list[list[str]] = []
    for idx in _batches(len(encoded), batch_size, None):
        batch = collate([encoded[i] for i in idx])
        pred = model.predict(batch)
        for row, i in enumerate(idx):
            n = min(len(examples[i].query), batch.shape[1])
            tags = [ctx.scheme.tag(int(t)) for t in pred[row, :n]]
            tags += ["O"] * (len(examples[i].query) - n)
            out.append(repair_bio(tags))
    return out


def evaluate_model(model: TaggerModel, examples: Sequence[QueryExample], ctx: DataContext,
                   k: int, batch_size: int = 128) -> SpanReport:
    if not examples:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict_tags(model, examples, ctx, k, batch_size)
    return span_f1([ex.tags for ex in examples], pred, ctx.scheme.categories)


# ------------------------------------------------------------------ Stage I

def stage1_pretrain(model: TaggerModel, unlabeled: Sequence[QueryExample], ctx: DataContext,
                    cfg: StageConfig, heldout: Sequence[QueryExample] = ()):
    """Masked-token training on unlabeled text; the tagging head is not touched.

    Inputs carry ``cfg.title_count`` titles, the same layout the tagging
    stages see, so title positions and the title segment embedding get
    trained as well. Every non-pad token can be masked.
    """
    if not unlabeled:
        raise ValueError("stage I needs a non-empty unlabeled set")
    t0 = time.perf_counter()
    rng = E.Rng(cfg.seed)
    report = TrainReport("I", extra={"mlm_accuracy": []})
    opt = E.make_optimizer(cfg.optimizer, model.pretraining_parameters(), cfg.lr)
    encoded = ctx.encode(unlabeled, cfg.title_count)
    held = ctx.encode(heldout, cfg.title_count) if heldout else []
    V = model.config.vocab_size
    per_epoch = _steps_per_epoch(len(encoded), cfg.batch_size)
    for epoch in range(cfg.epochs):
        losses = []
        for step, idx in enumerate(_batches(len(encoded), cfg.batch_size,
                                            rng.child("batches", epoch))):
            batch = collate([encoded[i] for i in idx])
            _set_rate(opt, cfg, epoch, step, per_epoch)
            masked, targets, sel = mask_batch(batch.token_ids, batch.pad_mask,
                                              rng.child("mlm", epoch, step), V, cfg.mlm_prob)
            batch.token_ids = masked
            plan = DropoutPlan(model.config.dropout_rate, rng.child("dropout", epoch, step))
            logits = model.mlm_logits(model.embed(batch), dropout=plan)
            loss = masked_cross_entropy(logits, targets, sel.astype(np.float64))
            _step(opt, loss)
            losses.append(loss.item())
        report.train_loss.append(float(np.mean(losses)))
        if held:
            report.extra["mlm_accuracy"].append(mlm_accuracy(model, held, rng.child("heldout"),
                                                             cfg.mlm_prob, cfg.eval_batch_size))
        report.stop_epoch = epoch + 1
    report.best_epoch = report.stop_epoch
    report.wall_time = time.perf_counter() - t0
    return model, report


def mlm_accuracy(model: TaggerModel, encoded, rng: E.Rng, prob: float = 0.15,
                 batch_size: int = 128) -> float:
    """Top-1 accuracy at masked positions; the masks depend only on ``rng``."""
    correct = total = 0
    for b, idx in enumerate(_batches(len(encoded), batch_size, None)):
        batch = collate([encoded[i] for i in idx])
        masked, targets, sel = mask_batch(batch.token_ids, batch.pad_mask, rng.child(b),
                                          model.config.vocab_size, prob)
        batch.token_ids = masked
        with E.no_grad():
            pred = model.mlm_logits(model.embed(batch)).data.argmax(-1)
        correct += int((pred[sel] == targets[sel]).sum())
        total += int(sel.sum())
    return correct / total if total else 0.0


# ------------------------------------------------------------ Stage II / III

def _supervised_epoch(model, opt, encoded, cfg: StageConfig, rng: E.Rng, epoch: int,
                      mode: str, stats: dict | None = None) -> float:
    losses = []
    per_epoch = _steps_per_epoch(len(encoded), cfg.batch_size)
    for step, idx in enumerate(_batches(len(encoded), cfg.batch_size,
                                        rng.child("batches", epoch))):
        batch = collate([encoded[i] for i in idx])
        if not (batch.loss_mask > 0).any():
            continue
        _set_rate(opt, cfg, epoch, step, per_epoch)
        plan = DropoutPlan(model.config.dropout_rate, rng.child("dropout", epoch, step))
        parts = regularized_objective(model, batch, cfg.perturbation,
                                      rng.child("perturb", epoch, step), mode, plan)
        _step(opt, parts.total)
        losses.append(parts.total.item())
        if stats is not None and parts.virtual is not None:
            stats.setdefault("virtual", []).append(parts.virtual.item())
    return float(np.mean(losses)) if losses else 0.0


def stage2_weak_train(model: TaggerModel, weak: Sequence[QueryExample],
                      dev: Sequence[QueryExample], ctx: DataContext, cfg: StageConfig):
    """Cross-entropy on weak labels with early stopping on dev overall F1.

    Training stops once dev F1 has failed to improve for ``patience``
    consecutive epochs; the best epoch's weights are restored.
    """
    if not weak:
        raise ValueError("stage II needs a non-empty weak set")
    if not dev:
        raise ValueError("stage II needs a dev set for early stopping")
    t0 = time.perf_counter()
    rng = E.Rng(cfg.seed)
    report = TrainReport("II")
    opt = E.make_optimizer(cfg.optimizer, model.tagging_parameters(), cfg.lr)
    encoded = ctx.encode(weak, cfg.title_count)
    best_f1, best_state, since = -1.0, model.state_dict(), 0
    for epoch in range(cfg.epochs):
        report.train_loss.append(_supervised_epoch(model, opt, encoded, cfg, rng, epoch,
                                                   "vanilla"))
        rep = evaluate_model(model, dev, ctx, cfg.title_count, cfg.eval_batch_size)
        report.dev_f1.append(rep.f1)
        report.dev_brand_f1.append(rep.category_f1("Brand"))
        report.stop_epoch = epoch + 1
        if rep.f1 > best_f1:
            best_f1, best_state, since = rep.f1, model.state_dict(), 0
            report.best_epoch = epoch + 1
        else:
            since += 1
            if since >= cfg.patience:
                break
    model.load_state_dict(best_state)
    report.wall_time = time.perf_counter() - t0
    return model, report


def stage3_finetune(model: TaggerModel, strong: Sequence[QueryExample], ctx: DataContext,
                    cfg: StageConfig, mode: str | None = None,
                    dev: Sequence[QueryExample] = ()):
    """Fine-tune on strong labels for a fixed number of epochs.

    ``mode`` selects the extra loss term: none, a random in-ball
    perturbation, or the PGD perturbation.
    """
    mode = mode or cfg.mode
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not strong:
        raise ValueError("stage III needs a non-empty strong set")
    t0 = time.perf_counter()
    rng = E.Rng(cfg.seed)
    report = TrainReport("III")
    opt = E.make_optimizer(cfg.optimizer, model.tagging_parameters(), cfg.lr)
    encoded = ctx.encode(strong, cfg.title_count)
    stats: dict = {}
    for epoch in range(cfg.epochs):
        report.train_loss.append(_supervised_epoch(model, opt, encoded, cfg, rng, epoch,
                                                   mode, stats))
        if dev:
            rep = evaluate_model(model, dev, ctx, cfg.title_count, cfg.eval_batch_size)
            report.dev_f1.append(rep.f1)
            report.dev_brand_f1.append(rep.category_f1("Brand"))
        report.stop_epoch = report.best_epoch = epoch + 1
    if "virtual" in stats:
        report.extra["virtual_loss"] = stats["virtual"]
    report.wall_time = time.perf_counter() - t0
    return model, report


# ----------------------------------------------------------------- pipeline

@dataclass
class PipelineConfig:
    seed: int = 0
    title_count: int = 3
    dev_fraction: float = 0.1
    embed_dim: int = 64
    encoder_layers: int = 2
    ffn_dim: int = 128
    max_seq_len: int = 64
    dropout_rate: float = 0.1
    activation: str = "relu"
    skip_stage1: bool = False
    skip_stage2: bool = False
    skip_stage3: bool = False
    stage1: StageConfig = field(default_factory=lambda: StageConfig(
        stage="I", epochs=3, batch_size=64, lr=1e-3))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(
        stage="II", epochs=10, patience=2))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(
        stage="III", epochs=15, mode="adversarial"))
    unlabeled_limit: int | None = None
    heldout_size: int = 500

    def __post_init__(self):
        for name, tag in (("stage1", "I"), ("stage2", "II"), ("stage3", "III")):
            v = getattr(self, name)
            if isinstance(v, dict):
                v = StageConfig(**{"stage": tag, **v})
                setattr(self, name, v)
            if v.stage != tag:
                raise ValueError(f"{name} must carry stage {tag}, got {v.stage}")
        if not 0.0 < self.dev_fraction < 1.0:
            raise ValueError("dev_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for name in ("stage1", "stage2", "stage3"):
            d[name] = getattr(self, name).to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, vocab_size: int, num_tags: int) -> ModelConfig:
        return ModelConfig(vocab_size, num_tags, self.embed_dim, self.encoder_layers,
                           self.ffn_dim, self.max_seq_len, self.dropout_rate, 2, self.activation)


@dataclass
class Corpora:
    unlabeled: list[QueryExample]
    weak: list[QueryExample]
    strong: list[QueryExample]
    test: list[QueryExample]
    scheme: LabelScheme = field(default_factory=LabelScheme)


@dataclass
class PipelineResult:
    model: TaggerModel
    vocab: Vocabulary
    scheme: LabelScheme
    reports: dict[str, TrainReport]
    test: SpanReport | None
    metrics: dict
    states: dict[str, dict] = field(default_factory=dict)


def stage_seed(master: int, name: str) -> int:
    return int(E.Rng(master).child("stage-seed", name).integers(0, 2**31 - 1))


def split_dev(strong: Sequence[QueryExample], fraction: float, seed: int):
    """Deterministic (train, dev) split of the strong set."""
    n = len(strong)
    n_dev = max(1, int(round(n * fraction))) if n > 1 else 0
    order = E.Rng(seed).child("dev-split").permutation(n)
    dev_idx = set(order[:n_dev].tolist())
    train = [ex for i, ex in enumerate(strong) if i not in dev_idx]
    dev = [strong[i] for i in sorted(dev_idx)]
    return train, dev


def build_vocab(corpora: Corpora) -> Vocabulary:
    def token_lists():
        for ex in list(corpora.unlabeled) + list(corpora.weak) + list(corpora.strong):
            yield ex.query
            yield from ex.titles
    return Vocabulary.build(token_lists())


def _configured(stage: StageConfig, seed: int, k: int) -> StageConfig:
    return dataclasses.replace(stage, seed=seed, title_count=k)


def _prefix_keys(cfg: PipelineConfig) -> tuple[str, str]:
    """Cache keys for the weights after Stage I and after Stage II.

    Everything that can influence those weights goes into the key, so two
    pipelines sharing a key would compute bit-identical states anyway.
    """
    base = {"seed": cfg.seed, "model": cfg.model_config(0, 0).to_dict(),
            "skip1": cfg.skip_stage1}
    if not cfg.skip_stage1:
        base.update(stage1=cfg.stage1.to_dict(), unlabeled_limit=cfg.unlabeled_limit,
                    heldout=cfg.heldout_size)
    k1 = json.dumps(base, sort_keys=True)
    second = {"after": k1, "skip2": cfg.skip_stage2, "dev_fraction": cfg.dev_fraction}
    if not cfg.skip_stage2:
        second.update(stage2=cfg.stage2.to_dict(), k=cfg.title_count)
    return k1, json.dumps(second, sort_keys=True)


def run_pipeline(corpora: Corpora, cfg: PipelineConfig, run_dir=None,
                 vocab: Vocabulary | None = None, init_state: dict | None = None,
                 keep_states: bool = False, cache: dict | None = None) -> PipelineResult:
    """Stage I -> II -> III, each starting from the previous stage's weights.

    With ``run_dir`` set, writes ``config.json``, one checkpoint per executed
    stage, ``report.json`` (includes wall time), ``metrics.json`` (time
    free, reproducible byte-for-byte) and ``metrics.tsv``.

    ``cache`` (a dict owned by the caller, valid for one corpus and
    vocabulary) memoizes the weights after Stages I and II, so sweeps whose
    cells share a prefix train it once.
    """
    scheme = corpora.scheme
    if not cfg.skip_stage1 and not corpora.unlabeled:
        raise ValueError("stage I enabled but the unlabeled set is empty")
    if not cfg.skip_stage2 and not corpora.weak:
        raise ValueError("stage II enabled but the weak set is empty")
    if (not cfg.skip_stage2 or not cfg.skip_stage3) and not corpora.strong:
        raise ValueError("stages II and III need the strong set (dev split and fine-tuning)")
    vocab = vocab or build_vocab(corpora)
    ctx = DataContext(vocab, scheme, cfg.max_seq_len)
    model = TaggerModel(cfg.model_config(len(vocab), scheme.num_tags),
                        E.Rng(cfg.seed).child("init"))
    if init_state is not None:
        model.load_state_dict(init_state)
    k = cfg.title_count
    train, dev = split_dev(corpora.strong, cfg.dev_fraction, cfg.seed) if corpora.strong else ([], [])
    reports: dict[str, TrainReport] = {}
    states: dict[str, dict] = {}
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        _write_json(os.path.join(run_dir, "config.json"), cfg.to_dict())

    def checkpoint(name, stage_key):
        if keep_states:
            states[stage_key] = model.state_dict()
        if run_dir is not None:
            path = os.path.join(run_dir, f"{name}.ckpt")
            save_checkpoint(model, path, vocab, scheme, {"stage": stage_key, "seed": cfg.seed})
            reports[stage_key].checkpoint = path

    key1, key2 = _prefix_keys(cfg) if cache is not None and init_state is None else (None, None)

    def cached(key, stage_key, train_fn):
        nonlocal model
        hit = cache.get(key) if key is not None else None
        if hit is not None:
            model.load_state_dict(hit[0])
            reports[stage_key] = copy.deepcopy(hit[1])
        else:
            model, reports[stage_key] = train_fn()
            if key is not None:
                cache[key] = (model.state_dict(), copy.deepcopy(reports[stage_key]))

    if not cfg.skip_stage1:
        unl = corpora.unlabeled[:cfg.unlabeled_limit] if cfg.unlabeled_limit else corpora.unlabeled
        n_held = min(cfg.heldout_size, len(unl) // 10)
        s1 = _configured(cfg.stage1, stage_seed(cfg.seed, "I"), cfg.stage1.title_count)
        cached(key1, "I", lambda: stage1_pretrain(model, unl[n_held:] or unl, ctx, s1,
                                                  unl[:n_held]))
        checkpoint("stage1", "I")
    if not cfg.skip_stage2:
        s2 = _configured(cfg.stage2, stage_seed(cfg.seed, "II"), k)
        cached(key2, "II", lambda: stage2_weak_train(model, corpora.weak, dev, ctx, s2))
        checkpoint("stage2", "II")
    if not cfg.skip_stage3:
        s3 = _configured(cfg.stage3, stage_seed(cfg.seed, "III"), k)
        model, reports["III"] = stage3_finetune(model, train, ctx, s3, dev=dev)
        checkpoint("stage3", "III")
    test = evaluate_model(model, corpora.test, ctx, k) if corpora.test else None
    metrics = {
        "seed": cfg.seed,
        "stages": {s: r.to_dict(include_time=False) for s, r in reports.items()},
        "test": test.to_dict() if test else None,
    }
    if run_dir is not None:
        _write_json(os.path.join(run_dir, "metrics.json"), metrics)
        _write_json(os.path.join(run_dir, "report.json"),
                    {"config": cfg.to_dict(),
                     "stages": {s: r.to_dict() for s, r in reports.items()},
                     "test": metrics["test"]})
        write_metrics_tsv(os.path.join(run_dir, "metrics.tsv"), reports, test)
    return PipelineResult(model, vocab, scheme, reports, test, metrics, states)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_metrics_tsv(path, reports: dict[str, TrainReport], test: SpanReport | None):
    """Tidy rows ``epoch  split  metric  value``; metric names carry the stage."""
    rows = ["epoch\tsplit\tmetric\tvalue"]
    for stage, r in reports.items():
        for i, v in enumerate(r.train_loss):
            rows.append(f"{i + 1}\ttrain\tstage{stage}.loss\t{v!r}")
        for i, v in enumerate(r.dev_f1):
            rows.append(f"{i + 1}\tdev\tstage{stage}.f1\t{v!r}")
        for i, v in enumerate(r.dev_brand_f1):
            rows.append(f"{i + 1}\tdev\tstage{stage}.brand_f1\t{v!r}")
        for name, series in r.extra.items():
            for i, v in enumerate(series):
                rows.append(f"{i + 1}\ttrain\tstage{stage}.{name}\t{v!r}")
    if test is not None:
        rows.append(f"0\ttest\tf1\t{test.f1!r}")
        for c, s in test.per_category.items():
            rows.append(f"0\ttest\t{c}.f1\t{s.f1!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")


# ---------------------------------------------------------------- baselines

def _strong_only(model, train, dev, ctx, cfg: StageConfig):
    return stage3_finetune(model, train, ctx, cfg, mode="vanilla", dev=dev)


def self_training_baseline(model: TaggerModel, strong: Sequence[QueryExample],
                           unlabeled: Sequence[QueryExample], ctx: DataContext,
                           cfg: StageConfig, rounds: int = 3,
                           dev: Sequence[QueryExample] = ()):
    """Teacher/student rounds with hard pseudo-labels.

    The teacher starts as the strong-only model. Each round it tags the
    unlabeled set, a fresh student (from the same initial weights) trains on
    pseudo-labels plus strong data, and the student becomes the teacher.
    """
    if not strong or not unlabeled:
        raise ValueError("self-training needs non-empty strong and unlabeled sets")
    init = model.state_dict()
    teacher, report = _strong_only(model, strong, dev, ctx, cfg)
    report.extra["round_dev_f1"] = [report.dev_f1[-1]] if report.dev_f1 else []
    k = cfg.title_count
    for r in range(rounds):
        pseudo_tags = predict_tags(teacher, unlabeled, ctx, k, cfg.eval_batch_size)
        pseudo = [ex.with_tags(t, quality="weak", source="synthetic")
                  for ex, t in zip(unlabeled, pseudo_tags)]
        student = teacher.copy()
        student.load_state_dict(init)
        round_cfg = dataclasses.replace(cfg, seed=cfg.seed + r + 1)
        teacher, rr = _strong_only(student, list(strong) + pseudo, dev, ctx, round_cfg)
        report.train_loss.extend(rr.train_loss)
        if rr.dev_f1:
            report.extra["round_dev_f1"].append(rr.dev_f1[-1])
    return teacher, report


def query_positions(batch) -> np.ndarray:
    return batch.pad_mask * (batch.segment_ids == 0)


def vat_baseline(model: TaggerModel, strong: Sequence[QueryExample],
                 unlabeled: Sequence[QueryExample], ctx: DataContext, cfg: StageConfig,
                 dev: Sequence[QueryExample] = ()):
    """Supervised loss on strong batches plus the PGD virtual loss on unlabeled
    batches (labels never read). An empty unlabeled set leaves plain
    strong-only fine-tuning."""
    if not strong:
        raise ValueError("VAT needs a non-empty strong set")
    if not unlabeled:
        return _strong_only(model, strong, dev, ctx, cfg)
    t0 = time.perf_counter()
    rng = E.Rng(cfg.seed)
    pcfg = cfg.perturbation
    report = TrainReport("III", extra={"vat_loss": []})
    opt = E.make_optimizer(cfg.optimizer, model.tagging_parameters(), cfg.lr)
    enc = ctx.encode(strong, cfg.title_count)
    enc_u = ctx.encode([ex.with_tags(None) if ex.tags is not None else ex for ex in unlabeled],
                       cfg.title_count)
    for epoch in range(cfg.epochs):
        losses = []
        u_order = rng.child("unlabeled", epoch).permutation(len(enc_u))
        for step, idx in enumerate(_batches(len(enc), cfg.batch_size,
                                            rng.child("batches", epoch))):
            batch = collate([enc[i] for i in idx])
            _set_rate(opt, cfg, epoch, step, _steps_per_epoch(len(enc), cfg.batch_size))
            plan = DropoutPlan(model.config.dropout_rate, rng.child("dropout", epoch, step))
            sup = supervised_loss(model.tag_logits(model.embed(batch), dropout=plan), batch)
            start = (step * cfg.batch_size) % len(enc_u)
            u_idx = np.take(u_order, range(start, start + cfg.batch_size), mode="wrap")
            ub = collate([enc_u[i] for i in u_idx])
            mask = query_positions(ub)
            emb = model.embed(ub)
            with frozen(model.parameters()), E.no_grad():
                clean = model.classify(E.Tensor(emb.x.data), ub.pad_mask).data
            with frozen(model.parameters()):
                pert = find_adversarial_perturbation(
                    lambda z: model.classify(z, ub.pad_mask), emb.x.data, pcfg,
                    rng.child("perturb", epoch, step), mask=mask, valid=ub.pad_mask, clean=clean)
            lv = sym_kl(clean, model.classify(emb.x + pert.delta, ub.pad_mask), mask)
            total = sup + E.scale(lv, pcfg.loss_weight)
            _step(opt, total)
            losses.append(total.item())
            report.extra["vat_loss"].append(lv.item())
        report.train_loss.append(float(np.mean(losses)))
        if dev:
            rep = evaluate_model(model, dev, ctx, cfg.title_count, cfg.eval_batch_size)
            report.dev_f1.append(rep.f1)
            report.dev_brand_f1.append(rep.category_f1("Brand"))
        report.stop_epoch = report.best_epoch = epoch + 1
    report.wall_time = time.perf_counter() - t0
    return model, report


__all__ = [
    "Corpora", "DataContext", "MODES", "PipelineConfig", "PipelineResult", "StageConfig",
    "TrainReport", "build_vocab", "evaluate_model", "mlm_accuracy", "predict_tags",
    "query_positions", "run_pipeline", "self_training_baseline", "split_dev",
    "stage1_pretrain", "stage2_weak_train", "stage3_finetune", "stage_seed", "vat_baseline",
    "write_metrics_tsv", "IGNORE_INDEX",
]
