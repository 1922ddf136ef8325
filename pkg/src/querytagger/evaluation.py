"""Exact-match span precision/recall/F1 over BIO tag sequences."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .corpus.schema import repair_bio, split_tag


class EntitySpan(NamedTuple):
    start: int
    end: int
    category: str


def extract_spans(tags: Sequence[str], repair: bool = False) -> list[EntitySpan]:
    """Maximal ``B-X (I-X)*`` runs as half-open spans.

    Gold tags must be well formed; pass ``repair=True`` for model output,
    which turns orphan ``I-X`` into ``B-X`` first.
    """
    if repair:
        tags = repair_bio(tags)
    spans = []
    start = cat = None
    for i, t in enumerate(tags):
        prefix, c = split_tag(t)
        if prefix == "I" and c == cat:
            continue
        if prefix == "I":
            raise ValueError(f"orphan {t!r} at position {i}; tags are not BIO well-formed")
        if cat is not None:
            spans.append(EntitySpan(start, i, cat))
        start, cat = (i, c) if prefix == "B" else (None, None)
    if cat is not None:
        spans.append(EntitySpan(start, len(tags), cat))
    return spans


def spans_to_tags(spans: Sequence[EntitySpan], length: int) -> list[str]:
    tags = ["O"] * length
    for s in spans:
        tags[s.start] = f"B-{s.category}"
        for i in range(s.start + 1, s.end):
            tags[i] = f"I-{s.category}"
    return tags


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class CategoryScore:
    precision: float
    recall: float
    f1: float
    support: int
    tp: int
    fp: int
    fn: int


@dataclass
class SpanReport:
    per_category: dict[str, CategoryScore]
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    token_accuracy: float
    n_examples: int = 0
    extra: dict = field(default_factory=dict)

    def category_f1(self, category: str) -> float:
        s = self.per_category.get(category)
        return s.f1 if s else 0.0

    def to_dict(self) -> dict:
        return {
            "overall": {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                        "tp": self.tp, "fp": self.fp, "fn": self.fn},
            "token_accuracy": self.token_accuracy,
            "n_examples": self.n_examples,
            "per_category": {c: vars(s) for c, s in sorted(self.per_category.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def span_f1(gold: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]],
            categories: Sequence[str] | None = None) -> SpanReport:
    """Micro-averaged span scores; predictions are BIO-repaired before scoring."""
    if len(gold) != len(predicted):
        raise ValueError(f"{len(gold)} gold sequences but {len(predicted)} predictions")
    tp, fp, fn = Counter(), Counter(), Counter()
    correct = total = 0
    for i, (g, p) in enumerate(zip(gold, predicted)):
        if len(g) != len(p):
            raise ValueError(f"example {i}: {len(g)} gold tags but {len(p)} predicted")
        gs = set(extract_spans(g))
        ps = set(extract_spans(p, repair=True))
        for s in gs & ps:
            tp[s.category] += 1
        for s in ps - gs:
            fp[s.category] += 1
        for s in gs - ps:
            fn[s.category] += 1
        correct += sum(a == b for a, b in zip(g, p))
        total += len(g)
    cats = set(tp) | set(fp) | set(fn) | set(categories or ())
    per = {}
    for c in sorted(cats):
        p_, r_, f_ = _prf(tp[c], fp[c], fn[c])
        per[c] = CategoryScore(p_, r_, f_, tp[c] + fn[c], tp[c], fp[c], fn[c])
    T, F_p, F_n = sum(tp.values()), sum(fp.values()), sum(fn.values())
    p_, r_, f_ = _prf(T, F_p, F_n)
    return SpanReport(per, p_, r_, f_, T, F_p, F_n,
                      correct / total if total else 0.0, len(gold))


def format_table(rows: dict[str, SpanReport], category: str = "Brand") -> str:
    """Plain-text results table: one row per system, columns Brand / Overall (percent)."""
    name_w = max([len("System")] + [len(n) for n in rows])
    lines = [f"{'System':<{name_w}}  {category:>8}  {'Overall':>8}",
             "-" * (name_w + 20)]
    for name, rep in rows.items():
        lines.append(f"{name:<{name_w}}  {100 * rep.category_f1(category):8.2f}  {100 * rep.f1:8.2f}")
    return "\n".join(lines)
