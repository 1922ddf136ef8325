"""Weak-label generation over a dataset and prompt-strategy scoring."""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from ..corpus.schema import LabelScheme, QueryExample
from ..evaluation import SpanReport, span_f1
from .clients import LabelerClient, LabelerError, PromptCache
from .parse import ParseFailure, parse_labels
from .prompts import DemonstrationPool, PromptStrategy, build_prompt


@dataclass
class WeakLabelStats:
    total: int = 0
    labeled: int = 0
    parse_failures: int = 0
    client_failures: int = 0
    cache_hits: int = 0
    client_calls: int = 0
    retries: int = 0
    failures: list[dict] = field(default_factory=list)

    @property
    def rejected(self) -> int:
        return self.total - self.labeled

    @property
    def rejection_rate(self) -> float:
        return self.rejected / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {"total": self.total, "labeled": self.labeled, "rejected": self.rejected,
                "rejection_rate": self.rejection_rate, "parse_failures": self.parse_failures,
                "client_failures": self.client_failures, "cache_hits": self.cache_hits,
                "client_calls": self.client_calls, "retries": self.retries}


def _call_with_retry(client: LabelerClient, prompt: str, max_retries: int, backoff: float,
                     counter: dict, lock: threading.Lock, sleep=time.sleep) -> str:
    delay = backoff
    for attempt in range(max_retries + 1):
        with lock:
            counter["calls"] += 1
        try:
            return client.complete(prompt)
        except LabelerError:
            if attempt == max_retries:
                raise
            with lock:
                counter["retries"] += 1
            sleep(delay)
            delay *= 2


def generate_weak_labels(dataset: Sequence[QueryExample], strategy: PromptStrategy,
                         client: LabelerClient, scheme: LabelScheme,
                         pool: DemonstrationPool | None = None, embed=None,
                         cache: PromptCache | None = None, workers: int = 4,
                         max_retries: int = 3, backoff: float = 0.5, sleep=time.sleep):
    """Label ``dataset`` with ``client``; returns ``(weak_examples, stats)``.

    Examples whose response fails to parse, or whose request still fails
    after ``max_retries`` retries with doubling delay, are dropped and
    counted. Survivors keep their order and become ``quality=weak,
    source=llm``. The cache is consulted before every call.
    """
    cache = cache if cache is not None else PromptCache()
    prompts = [build_prompt(strategy, ex, scheme, pool, embed) for ex in dataset]
    counter = {"calls": 0, "retries": 0}
    lock = threading.Lock()

    def label(i):
        try:
            response, hit = cache.get_or_call(
                prompts[i], lambda p: _call_with_retry(client, p, max_retries, backoff,
                                                       counter, lock, sleep))
        except LabelerError as exc:
            return i, None, "client", str(exc), False
        try:
            return i, parse_labels(response, dataset[i].query, scheme), None, None, hit
        except ParseFailure as exc:
            return i, None, "parse", exc.reason, hit

    if workers > 1 and len(dataset) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            results = list(pool_exec.map(label, range(len(dataset))))
    else:
        results = [label(i) for i in range(len(dataset))]

    stats = WeakLabelStats(total=len(dataset))
    out = []
    for i, tags, kind, reason, hit in results:
        stats.cache_hits += int(hit)
        if tags is None:
            if kind == "parse":
                stats.parse_failures += 1
            else:
                stats.client_failures += 1
            stats.failures.append({"index": i, "kind": kind, "reason": reason})
            continue
        out.append(dataset[i].with_tags(tags, quality="weak", source="llm"))
        stats.labeled += 1
    stats.client_calls = counter["calls"]
    stats.retries = counter["retries"]
    return out, stats


def evaluate_prompt_strategy(strategy: PromptStrategy, testset: Sequence[QueryExample],
                             client: LabelerClient, scheme: LabelScheme,
                             pool: DemonstrationPool | None = None, embed=None,
                             cache: PromptCache | None = None, workers: int = 4
                             ) -> tuple[SpanReport, WeakLabelStats]:
    """Score generated labels against gold; rejected examples count as all-O."""
    if any(ex.tags is None for ex in testset):
        raise ValueError("prompt-strategy evaluation needs gold tags on every example")
    # keep positions aligned: label each example individually in order
    labeled, stats = generate_weak_labels(testset, strategy, client, scheme, pool, embed,
                                          cache, workers)
    failed = {f["index"] for f in stats.failures}
    it = iter(labeled)
    predicted = [["O"] * len(ex.query) if i in failed else next(it).tags
                 for i, ex in enumerate(testset)]
    report = span_f1([ex.tags for ex in testset], predicted, scheme.categories)
    report.extra.update(strategy=strategy.name, rejection_rate=stats.rejection_rate)
    return report, stats
