"""Examples, label schemes, BIO helpers, tokenization and vocabularies."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

QUALITIES = ("strong", "weak", "unlabeled")
SOURCES = ("human", "crowd", "llm", "synthetic")

PAD, UNK, SEP, MASK = "[PAD]", "[UNK]", "[SEP]", "[MASK]"
PAD_ID, UNK_ID, SEP_ID, MASK_ID = 0, 1, 2, 3
RESERVED = (PAD, UNK, SEP, MASK)

IGNORE_INDEX = -100

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, detach punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class LabelScheme:
    """Entity categories plus the BIO tag inventory derived from them.

    ``outside_name`` is the word used for non-entity tokens in labeler
    responses; it maps to the ``O`` tag.
    """

    categories: tuple[str, ...] = ("Brand", "Product", "Location", "Attribute")
    outside_name: str = "Other"

    def __post_init__(self):
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("duplicate categories in label scheme")
        if self.outside_name in self.categories:
            raise ValueError(f"{self.outside_name!r} is reserved for the outside class")

    @property
    def tags(self) -> list[str]:
        out = ["O"]
        for c in self.categories:
            out += [f"B-{c}", f"I-{c}"]
        return out

    @property
    def num_tags(self) -> int:
        return 1 + 2 * len(self.categories)

    def tag_id(self, tag: str) -> int:
        if tag == "O":
            return 0
        prefix, cat = split_tag(tag)
        try:
            idx = self.categories.index(cat)
        except ValueError:
            raise KeyError(f"unknown tag {tag!r}") from None
        return 1 + 2 * idx + (prefix == "I")

    def tag(self, tag_id: int) -> str:
        return self.tags[tag_id]

    def to_dict(self) -> dict:
        return {"categories": list(self.categories), "outside_name": self.outside_name}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelScheme":
        return cls(tuple(d["categories"]), d.get("outside_name", "Other"))


def split_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    prefix, _, cat = tag.partition("-")
    if prefix not in ("B", "I") or not cat:
        raise ValueError(f"malformed BIO tag {tag!r}")
    return prefix, cat


def is_well_formed(tags: Sequence[str]) -> bool:
    prev = None
    for t in tags:
        prefix, cat = split_tag(t)
        if prefix == "I" and prev != cat:
            return False
        prev = cat
    return True


def repair_bio(tags: Sequence[str]) -> list[str]:
    """Turn every orphan ``I-X`` (no ``B-X``/``I-X`` before it) into ``B-X``."""
    out = []
    prev = None
    for t in tags:
        prefix, cat = split_tag(t)
        if prefix == "I" and prev != cat:
            t = f"B-{cat}"
        out.append(t)
        prev = cat
    return out


def tag_categories(tags: Sequence[str]) -> list[str | None]:
    return [split_tag(t)[1] for t in tags]


def categories_to_bio(cats: Sequence[str | None]) -> list[str]:
    """BIO by contiguity: runs of the same category form one entity."""
    out = []
    prev = None
    for c in cats:
        if c is None:
            out.append("O")
        else:
            out.append(f"I-{c}" if c == prev else f"B-{c}")
        prev = c
    return out


@dataclass
class QueryExample:
    query: list[str]
    titles: list[list[str]] = field(default_factory=list)
    tags: list[str] | None = None
    quality: str = "unlabeled"
    source: str = "synthetic"

    def __post_init__(self):
        if self.quality not in QUALITIES:
            raise ValueError(f"unknown quality {self.quality!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.tags is not None:
            if len(self.tags) != len(self.query):
                raise ValueError(
                    f"{len(self.tags)} tags for {len(self.query)} query tokens")
            if not is_well_formed(self.tags):
                raise ValueError(f"tags are not BIO well-formed: {self.tags}")

    def with_tags(self, tags, quality=None, source=None) -> "QueryExample":
        return QueryExample(list(self.query), [list(t) for t in self.titles],
                            None if tags is None else list(tags),
                            quality or self.quality, source or self.source)


class Vocabulary:
    """Token/id map with ``[PAD]=0, [UNK]=1, [SEP]=2, [MASK]=3`` reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        counts = Counter()
        for toks in token_lists:
            counts.update(toks)
        for r in RESERVED:
            counts.pop(r, None)
        ordered = sorted((t for t, c in counts.items() if c >= min_count),
                         key=lambda t: (-counts[t], t))
        return cls(ordered)

    @classmethod
    def from_examples(cls, examples: Iterable[QueryExample], min_count: int = 1):
        def gen():
            for ex in examples:
                yield ex.query
                yield from ex.titles
        return cls.build(gen(), min_count)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        get = self.stoi.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, items: Sequence[str]) -> "Vocabulary":
        if tuple(items[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        return cls(items[4:])
