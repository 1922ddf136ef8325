"""Prompt construction for LLM weak labeling.

Four strategies:

* ``prompting``: instruction and target query only.
* ``demonstration``: a fixed set of labeled examples chosen once so that
  together they cover every category.
* ``dynamic``: demonstrations retrieved per query by embedding similarity,
  most similar (``+``), least similar (``-``) or both in either order.
* ``cot``: fixed demonstrations plus the query's search titles as an
  explicit reasoning block placed before the query.

Templates are plain-text resources under ``templates/<version>/`` with
``string.Template`` placeholders; lines starting with ``# `` are comments.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from importlib import resources
from string import Template
from typing import Callable, Sequence

import numpy as np

from ..corpus.schema import LabelScheme, QueryExample, Vocabulary, tag_categories

KINDS = ("prompting", "demonstration", "dynamic", "cot")
POLARITIES = ("+", "-", "+-", "-+")
TEMPLATE_VERSION = "v1"
TEMPLATE_NAMES = ("instruction", "demo", "reasoning", "target")

_ALIASES = {
    "prompting": "prompting", "prompt": "prompting", "zero-shot": "prompting",
    "demonstration": "demonstration", "demo": "demonstration",
    "dynamic": "dynamic", "dynamicdemonstration": "dynamic", "dynamic-demonstration": "dynamic",
    "cot": "cot", "chainofthoughts": "cot", "chain-of-thoughts": "cot",
}


@dataclass(frozen=True)
class PromptStrategy:
    kind: str = "prompting"
    demo_count: int = 3
    polarity: str = "+"
    title_count: int = 3
    template_version: str = TEMPLATE_VERSION

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.lower().replace("_", "-"))
        if kind is None:
            raise ValueError(f"unknown prompt strategy {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")
        if kind != "prompting" and self.demo_count < 1:
            raise ValueError(f"strategy {kind!r} needs demo_count >= 1")
        if kind == "cot" and self.title_count < 1:
            raise ValueError("cot needs title_count >= 1")

    @property
    def uses_demos(self) -> bool:
        return self.kind != "prompting"

    @property
    def name(self) -> str:
        if self.kind == "dynamic":
            return f"dynamic({self.polarity})"
        return self.kind


@functools.lru_cache(maxsize=None)
def load_templates(version: str = TEMPLATE_VERSION) -> dict[str, Template]:
    base = resources.files("querytagger.weak") / "templates" / version
    out = {}
    for name in TEMPLATE_NAMES:
        try:
            text = (base / f"{name}.txt").read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ValueError(f"prompt template {version}/{name}.txt not found") from None
        lines = [ln for ln in text.splitlines() if not ln.startswith("# ")]
        out[name] = Template("\n".join(lines).strip("\n"))
    return out


# -------------------------------------------------------------- responses

def category_of(tag: str, scheme: LabelScheme) -> str:
    cats = tag_categories([tag])
    return cats[0] if cats[0] is not None else scheme.outside_name


def format_response(query: Sequence[str], tags: Sequence[str], scheme: LabelScheme) -> str:
    """Render gold tags in the response grammar, one ``token -> Category`` per line."""
    return "\n".join(f"{tok} -> {category_of(tag, scheme)}" for tok, tag in zip(query, tags))


# ------------------------------------------------------------------- pools

class DemonstrationPool:
    """Labeled examples with unit-normalized mean token-embedding vectors."""

    def __init__(self, examples: Sequence[QueryExample], vectors: np.ndarray):
        if any(ex.tags is None for ex in examples):
            raise ValueError("demonstration pool examples need gold tags")
        vectors = np.asarray(vectors, dtype=np.float64)
        if len(examples) != len(vectors):
            raise ValueError("one vector per pool example required")
        self.examples = list(examples)
        self.vectors = vectors

    def __len__(self):
        return len(self.examples)

    @classmethod
    def build(cls, examples: Sequence[QueryExample], embed: Callable[[Sequence[str]], np.ndarray]):
        vecs = np.array([embed(ex.query) for ex in examples]) if examples else np.zeros((0, 1))
        return cls(examples, vecs)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def table_embedder(table: np.ndarray, vocab: Vocabulary) -> Callable[[Sequence[str]], np.ndarray]:
    """Mean of embedding-table rows for the tokens, unit-normalized."""
    table = np.asarray(table, dtype=np.float64)

    def embed(tokens):
        if not tokens:
            return np.zeros(table.shape[1])
        return _unit(table[vocab.encode(tokens)].mean(axis=0))
    return embed


def model_embedder(model, vocab: Vocabulary):
    return table_embedder(model.params["tok_emb"].data, vocab)


def hashed_embedder(dim: int = 64, seed: int = 0):
    """Fixed pseudo-random vector per token, for use without a trained model."""
    from ..engine.rng import Rng

    cache: dict[str, np.ndarray] = {}

    def vec(tok):
        if tok not in cache:
            cache[tok] = Rng(seed).child("token", tok).normal(dim)
        return cache[tok]

    def embed(tokens):
        if not tokens:
            return np.zeros(dim)
        return _unit(np.mean([vec(t) for t in tokens], axis=0))
    return embed


def retrieve_demonstrations(query_vec: np.ndarray, pool: DemonstrationPool, k: int,
                            polarity: str = "+") -> list[QueryExample]:
    """Most similar (``+``) and/or least similar (``-``) pool examples by cosine.

    Ties are broken by pool index, lowest first, in both directions.
    """
    if len(pool) == 0:
        raise ValueError("demonstration pool is empty")
    if polarity not in POLARITIES:
        raise ValueError(f"polarity must be one of {POLARITIES}")
    need = k * (2 if len(polarity) == 2 else 1)
    if len(pool) < need:
        raise ValueError(f"pool of {len(pool)} too small for {need} demonstrations")
    sims = pool.vectors @ _unit(np.asarray(query_vec, dtype=np.float64))
    idx = np.arange(len(pool))
    top = np.lexsort((idx, -sims))[:k]
    bottom = np.lexsort((idx, sims))[:k]
    picks = {"+": top, "-": bottom}
    return [pool.examples[i] for sign in polarity for i in picks[sign]]


def fixed_demonstrations(pool: DemonstrationPool | Sequence[QueryExample], count: int,
                         scheme: LabelScheme) -> list[QueryExample]:
    """Greedy category cover: repeatedly take the first example adding the most
    uncovered categories, then fill up in pool order."""
    examples = pool.examples if isinstance(pool, DemonstrationPool) else list(pool)
    if len(examples) < count:
        raise ValueError(f"need {count} demonstrations, pool has {len(examples)}")
    chosen: list[int] = []
    covered: set[str] = set()
    cats_of = [set(c for c in tag_categories(ex.tags) if c) for ex in examples]
    while len(chosen) < count:
        best, gain = None, 0
        for i, cats in enumerate(cats_of):
            if i in chosen:
                continue
            g = len(cats - covered)
            if g > gain:
                best, gain = i, g
        if best is None:
            best = next(i for i in range(len(examples)) if i not in chosen)
        chosen.append(best)
        covered |= cats_of[best]
    return [examples[i] for i in chosen]


# ------------------------------------------------------------------ prompts

def build_prompt(strategy: PromptStrategy, example: QueryExample, scheme: LabelScheme,
                 pool: DemonstrationPool | None = None, embed=None) -> str:
    """Prompt text for one query; a pure function of its arguments."""
    tpl = load_templates(strategy.template_version)
    parts = [tpl["instruction"].substitute(
        categories=", ".join(list(scheme.categories) + [scheme.outside_name]),
        outside=scheme.outside_name)]
    demos: list[QueryExample] = []
    if strategy.kind in ("demonstration", "cot"):
        if pool is None or len(pool) == 0:
            raise ValueError(f"strategy {strategy.kind!r} needs a demonstration pool")
        demos = fixed_demonstrations(pool, strategy.demo_count, scheme)
    elif strategy.kind == "dynamic":
        if pool is None or len(pool) == 0:
            raise ValueError("dynamic demonstrations need a non-empty pool")
        if embed is None:
            raise ValueError("dynamic demonstrations need an embedding function")
        demos = retrieve_demonstrations(embed(example.query), pool, strategy.demo_count,
                                        strategy.polarity)
    for i, d in enumerate(demos, 1):
        parts.append(tpl["demo"].substitute(index=i, query=" ".join(d.query),
                                            answer=format_response(d.query, d.tags, scheme)))
    if strategy.kind == "cot":
        titles = example.titles[:strategy.title_count]
        if not titles:
            raise ValueError("chain-of-thoughts prompting needs search titles for the query")
        parts.append(tpl["reasoning"].substitute(
            titles="\n".join(f"- {' '.join(t)}" for t in titles)))
    parts.append(tpl["target"].substitute(query=" ".join(example.query)))
    return "\n\n".join(parts) + "\n"


@dataclass
class ParsedPrompt:
    """What a reader of a prompt built here can recover from its text."""

    query: list[str]
    titles: list[list[str]]
    demos: list[tuple[list[str], list[str]]]  # (tokens, categories)


def read_prompt(prompt: str) -> ParsedPrompt:
    """Inverse of :func:`build_prompt` for the bundled template layout."""
    lines = prompt.splitlines()
    query: list[str] = []
    titles: list[list[str]] = []
    demos: list[tuple[list[str], list[str]]] = []
    section = None
    current: tuple[list[str], list[str]] | None = None
    for line in lines:
        if line.startswith("### "):
            head = line[4:]
            section = "demo" if head.startswith("Example") else (
                "titles" if head.startswith("Search") else "target")
            current = None
            continue
        if line.startswith("Query: "):
            toks = line[len("Query: "):].split()
            if section == "demo":
                current = (toks, [])
                demos.append(current)
            elif section == "target":
                query = toks
            continue
        if section == "titles" and line.startswith("- "):
            titles.append(line[2:].split())
        elif section == "demo" and current is not None and "->" in line:
            current[1].append(line.split("->", 1)[1].strip())
    return ParsedPrompt(query, titles, demos)
