"""JSONL and CoNLL-style dataset files."""
from __future__ import annotations

import json
import os
from typing import Iterable, Sequence

from .schema import QueryExample, tokenize


class DatasetFormatError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


def example_to_dict(ex: QueryExample) -> dict:
    return {
        "query": " ".join(ex.query),
        "titles": [" ".join(t) for t in ex.titles],
        "tags": ex.tags,
        "quality": ex.quality,
        "source": ex.source,
    }


def example_from_dict(d: dict) -> QueryExample:
    titles = d.get("titles") or []
    if not isinstance(d.get("query"), str) or not isinstance(titles, list):
        raise ValueError("'query' must be a string and 'titles' a list of strings")
    return QueryExample(
        query=tokenize(d["query"]),
        titles=[tokenize(t) for t in titles],
        tags=d.get("tags"),
        quality=d.get("quality", "unlabeled"),
        source=d.get("source", "synthetic"),
    )


def write_jsonl(examples: Iterable[QueryExample], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(json.dumps(example_to_dict(ex), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_jsonl(path) -> list[QueryExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(example_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise DatasetFormatError(os.fspath(path), lineno, str(e)) from None
    return out


def write_conll(examples: Sequence[QueryExample], path) -> int:
    """Query-only export: ``token<TAB>tag`` lines, blank line between queries."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, ex in enumerate(examples):
            if ex.tags is None:
                raise ValueError(f"example {i} has no tags; CoNLL export needs labels")
            for tok, tag in zip(ex.query, ex.tags):
                f.write(f"{tok}\t{tag}\n")
            f.write("\n")
    return len(examples)


def read_conll(path, quality: str = "strong", source: str = "human") -> list[QueryExample]:
    out = []
    toks: list[str] = []
    tags: list[str] = []
    start = 1

    def flush(lineno):
        if toks:
            try:
                out.append(QueryExample(list(toks), [], list(tags), quality, source))
            except ValueError as e:
                raise DatasetFormatError(os.fspath(path), lineno, str(e)) from None
        toks.clear()
        tags.clear()

    with open(path, encoding="utf-8") as f:
        lineno = 0
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                flush(start)
                start = lineno + 1
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DatasetFormatError(os.fspath(path), lineno, "expected 'token<TAB>tag'")
            toks.append(parts[0])
            tags.append(parts[1])
        flush(start)
    return out
