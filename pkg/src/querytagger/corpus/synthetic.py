"""Template-grammar generator for ads-style queries with search titles.

Queries are drawn from slot templates (``"{Brand} {Product} in {Location}"``)
over per-category lexicons of synthetic words with Zipf-distributed
frequencies, so the labeled sets leave a long tail of words that only the
unlabeled pool covers. A share of words belongs to two categories; the
query alone cannot tell them apart, but titles carry category cue words
("company", "warranty", "weather", ...) that can.
"""
from __future__ import annotations

import dataclasses
import itertools
import re
from dataclasses import dataclass, field

import numpy as np

from ..engine.rng import Rng
from .noise import corrupt_labels
from .schema import LabelScheme, QueryExample

DEFAULT_TEMPLATES = [
    ("{Brand} {Product}", 2),
    ("{Attribute} {Product}", 2),
    ("{Product} {Brand}", 1),
    ("{Product} {Attribute}", 1),
    ("{Brand} {Location}", 1),
    ("{Product} in {Location}", 2),
    ("{Product} near {Location}", 1),
    ("{Brand} {Product} {Location}", 2),
    ("{Attribute} {Product} {Brand}", 2),
    ("{Brand} {Attribute} {Product}", 2),
    ("{pre} {Brand} {Product}", 2),
    ("{Brand} {Product} {post}", 2),
    ("{pre} {Attribute} {Product} in {Location}", 2),
    ("{pre} {Product} near {Location}", 2),
    ("{pre} {Brand} {Attribute} {Product} {Location}", 1),
    ("{Attribute} {Product} {Brand} {post}", 2),
]

AMBIGUOUS_PAIRS = [("Brand", "Attribute"), ("Product", "Location")]

PRE_FILLERS = ["cheap", "best", "buy", "top", "new", "used", "discount", "affordable"]
POST_FILLERS = ["online", "reviews", "deals", "sale", "prices", "coupon"]
CONNECTORS = ["in", "near"]

CUES = {
    "Brand": ["company", "inc", "corporation", "founded", "headquarters", "ceo", "trademark", "subsidiary"],
    "Product": ["models", "specs", "manual", "warranty", "accessories", "replacement", "catalog", "unboxing"],
    "Location": ["city", "map", "weather", "hotels", "downtown", "county", "directions", "restaurants"],
    "Attribute": ["color", "size", "material", "style", "finish", "dimensions", "variant", "shade"],
}

DISTRACTORS = ["the", "and", "of", "to", "with", "your", "guide", "review", "2024", "official",
               "site", "compare", "free", "shipping", "how", "what", "tips", "for", "a", "all"]

_SLOT_RE = re.compile(r"\{(\w+)\}")
_ONSETS = list("bcdfghjklmnprstvz") + ["br", "st", "tr", "pl", "gr", "sh", "ch", "kr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ee"]
_CODAS = ["", "", "", "n", "r", "l", "x", "s", "m"]


@dataclass
class GenConfig:
    seed: int = 0
    n_unlabeled: int = 50_000
    n_weak: int = 5_000
    n_strong: int = 500
    n_test: int = 500
    noise_rate: float = 0.3
    categories: list = field(default_factory=lambda: ["Brand", "Product", "Location", "Attribute"])
    lexicon_sizes: dict = field(default_factory=lambda: {
        "Brand": 400, "Product": 400, "Location": 200, "Attribute": 200})
    multiword_prob: dict = field(default_factory=lambda: {
        "Brand": 0.25, "Product": 0.6, "Location": 0.5, "Attribute": 0.1})
    n_ambiguous: int = 60
    ambiguous_prob: float = 0.6
    zipf_exponent: float = 1.0
    titles_per_query: int = 3
    title_len_min: int = 3
    title_len_max: int = 6
    cue_prob: float = 0.4
    copy_prob: float = 0.5
    distinct_queries: bool = False
    templates: list | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Lexicon:
    entries: dict[str, list[tuple[str, ...]]]
    ambiguous: dict[str, list[str]]
    cues: dict[str, list[str]]

    def token_categories(self) -> dict[str, set[str]]:
        """Every category a token can take, including ambiguous readings."""
        out: dict[str, set[str]] = {}
        for cat, phrases in self.entries.items():
            for ph in phrases:
                for tok in ph:
                    out.setdefault(tok, set()).add(cat)
        for word, cats in self.ambiguous.items():
            out.setdefault(word, set()).update(cats)
        return out

    def cue_categories(self) -> dict[str, str]:
        return {w: cat for cat, ws in self.cues.items() for w in ws}

    def to_dict(self) -> dict:
        return {"entries": {c: [list(p) for p in ps] for c, ps in self.entries.items()},
                "ambiguous": self.ambiguous, "cues": self.cues}

    @classmethod
    def from_dict(cls, d: dict) -> "Lexicon":
        return cls({c: [tuple(p) for p in ps] for c, ps in d["entries"].items()},
                   {w: list(cs) for w, cs in d["ambiguous"].items()}, d["cues"])


@dataclass
class SyntheticCorpus:
    unlabeled: list[QueryExample]
    weak: list[QueryExample]
    strong: list[QueryExample]
    test: list[QueryExample]
    lexicon: Lexicon
    scheme: LabelScheme
    config: GenConfig


def _word_factory(rng: Rng, taken: set[str]):
    def make():
        for _ in range(10_000):
            n_syl = 2 + int(rng.random() < 0.4)
            w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                        for _ in range(n_syl)) + _CODAS[rng.integers(len(_CODAS))]
            if w not in taken:
                taken.add(w)
                return w
        raise RuntimeError("ran out of synthetic words")
    return make


def build_lexicon(cfg: GenConfig, rng: Rng) -> Lexicon:
    taken = set(PRE_FILLERS + POST_FILLERS + CONNECTORS + DISTRACTORS)
    cues = {}
    for cat in cfg.categories:
        cues[cat] = list(CUES[cat]) if cat in CUES else []
        taken.update(cues[cat])
    make = _word_factory(rng.child("words"), taken)
    for cat in cfg.categories:
        if not cues[cat]:
            cues[cat] = [make() for _ in range(8)]
    entries = {}
    for cat in cfg.categories:
        size = int(cfg.lexicon_sizes.get(cat, 100))
        if size < 1:
            raise ValueError(f"lexicon for {cat} must have at least one entry")
        p_multi = float(cfg.multiword_prob.get(cat, 0.0))
        phrases = []
        for _ in range(size):
            n = 2 if rng.random() < p_multi else 1
            phrases.append(tuple(make() for _ in range(n)))
        entries[cat] = phrases
    pairs = [p for p in AMBIGUOUS_PAIRS if p[0] in cfg.categories and p[1] in cfg.categories]
    ambiguous: dict[str, list[str]] = {}
    if pairs:
        for i in range(cfg.n_ambiguous):
            ambiguous[make()] = list(pairs[i % len(pairs)])
    return Lexicon(entries, ambiguous, cues)


def _templates(cfg: GenConfig):
    raw = cfg.templates if cfg.templates is not None else list(DEFAULT_TEMPLATES)
    if cfg.templates is None:
        for cat in cfg.categories:
            if cat not in ("Brand", "Product", "Location", "Attribute") and "Product" in cfg.categories:
                raw += [(f"{{{cat}}} {{Product}}", 1), (f"{{Product}} {{{cat}}}", 1)]
    allowed = set(cfg.categories) | {"pre", "post"}
    out = []
    for tpl, w in raw:
        slots = _SLOT_RE.findall(tpl)
        if set(slots) <= allowed:
            out.append((tpl.split(), float(w)))
    if not out:
        out = [([f"{{{c}}}"], 1.0) for c in cfg.categories]
    return out


class _Sampler:
    def __init__(self, cfg: GenConfig, lex: Lexicon):
        self.cfg = cfg
        self.lex = lex
        self.templates = _templates(cfg)
        w = np.array([t[1] for t in self.templates])
        self.tpl_cdf = np.cumsum(w / w.sum())
        self.cdf = {}
        for cat, phrases in lex.entries.items():
            self.cdf[cat] = self._zipf_cdf(len(phrases))
        self.amb_by_cat: dict[str, list[str]] = {}
        for word, cats in lex.ambiguous.items():
            for c in cats:
                self.amb_by_cat.setdefault(c, []).append(word)
        self.amb_cdf = {c: self._zipf_cdf(len(ws)) for c, ws in self.amb_by_cat.items()}

    def _zipf_cdf(self, n):
        w = 1.0 / np.arange(1, n + 1) ** self.cfg.zipf_exponent
        return np.cumsum(w / w.sum())

    @staticmethod
    def _draw(cdf, r):
        return min(int(np.searchsorted(cdf, r.random(), side="right")), len(cdf) - 1)

    def capacity(self) -> float:
        total = 0.0
        for words, _ in self.templates:
            n = 1.0
            for w in words:
                m = _SLOT_RE.fullmatch(w)
                if not m:
                    continue
                slot = m.group(1)
                if slot == "pre":
                    n *= len(PRE_FILLERS)
                elif slot == "post":
                    n *= len(POST_FILLERS)
                else:
                    n *= len(self.lex.entries[slot]) + len(self.amb_by_cat.get(slot, []))
            total += n
        return total

    def query(self, r: Rng):
        words, _ = self.templates[self._draw(self.tpl_cdf, r)]
        tokens: list[str] = []
        tags: list[str] = []
        entities: list[tuple[tuple[str, ...], str]] = []
        used_amb = False
        # an ambiguous word never shares a query with either of its
        # categories, so title cue words for the pair all point at it
        slots = {m.group(1) for m in map(_SLOT_RE.fullmatch, words) if m}
        blocked = {a for pair in AMBIGUOUS_PAIRS for a, b in (pair, pair[::-1]) if b in slots}
        for w in words:
            m = _SLOT_RE.fullmatch(w)
            if not m:
                tokens.append(w)
                tags.append("O")
                continue
            slot = m.group(1)
            if slot == "pre":
                tokens.append(PRE_FILLERS[r.integers(len(PRE_FILLERS))])
                tags.append("O")
                continue
            if slot == "post":
                tokens.append(POST_FILLERS[r.integers(len(POST_FILLERS))])
                tags.append("O")
                continue
            if (not used_amb and slot in self.amb_by_cat and slot not in blocked
                    and r.random() < self.cfg.ambiguous_prob):
                word = self.amb_by_cat[slot][self._draw(self.amb_cdf[slot], r)]
                phrase = (word,)
                used_amb = True
                # the reading is a fair coin whatever the slot, so the
                # surrounding template carries no prior on it
                slot = self.lex.ambiguous[word][int(r.random() < 0.5)]
            else:
                phrase = self.lex.entries[slot][self._draw(self.cdf[slot], r)]
            tokens.extend(phrase)
            tags.extend([f"B-{slot}"] + [f"I-{slot}"] * (len(phrase) - 1))
            entities.append((phrase, slot))
        return tokens, tags, entities

    def titles(self, entities, r: Rng) -> list[list[str]]:
        cfg = self.cfg
        out = []
        for _ in range(cfg.titles_per_query):
            pieces: list[list[str]] = []
            for phrase, cat in entities:
                if r.random() < cfg.copy_prob:
                    pieces.append(list(phrase))
                if r.random() < cfg.cue_prob:
                    cues = self.lex.cues[cat]
                    pieces.append([cues[r.integers(len(cues))]])
            target = int(r.integers(cfg.title_len_min, cfg.title_len_max + 1))
            n = sum(len(p) for p in pieces)
            while n < target:
                pieces.append([DISTRACTORS[r.integers(len(DISTRACTORS))]])
                n += 1
            order = r.permutation(len(pieces))
            out.append(list(itertools.chain.from_iterable(pieces[i] for i in order)))
        return out


def generate_synthetic_corpus(cfg: GenConfig, rng: Rng | None = None) -> SyntheticCorpus:
    """Draw the unlabeled, weak, strong and test sets.

    Each example uses its own stream keyed by (set name, index), so any
    example can be regenerated independently of the others.
    """
    rng = rng if rng is not None else Rng(cfg.seed)
    scheme = LabelScheme(tuple(cfg.categories))
    lex = build_lexicon(cfg, rng.child("lexicon"))
    sampler = _Sampler(cfg, lex)
    total = cfg.n_unlabeled + cfg.n_weak + cfg.n_strong + cfg.n_test
    if cfg.distinct_queries and total > sampler.capacity():
        raise ValueError(f"lexicon too small: {total} distinct queries requested, "
                         f"grammar can produce at most {int(sampler.capacity())}")
    seen: set[tuple[str, ...]] = set()

    def draw(name, i):
        for attempt in range(1000):
            r = rng.child(name, i, attempt)
            tokens, tags, entities = sampler.query(r)
            if not cfg.distinct_queries or tuple(tokens) not in seen:
                seen.add(tuple(tokens))
                return tokens, tags, sampler.titles(entities, r), r
        raise ValueError(f"lexicon too small to draw a distinct query for {name}[{i}]")

    sets = {}
    for name, n in (("test", cfg.n_test), ("strong", cfg.n_strong),
                    ("weak", cfg.n_weak), ("unlabeled", cfg.n_unlabeled)):
        examples = []
        for i in range(n):
            tokens, tags, titles, r = draw(name, i)
            if name == "unlabeled":
                ex = QueryExample(tokens, titles, None, "unlabeled", "synthetic")
            elif name == "weak":
                noisy = corrupt_labels(tags, cfg.noise_rate, r.child("noise"), scheme)
                ex = QueryExample(tokens, titles, noisy, "weak", "crowd")
            else:
                ex = QueryExample(tokens, titles, tags, "strong", "human")
            examples.append(ex)
        sets[name] = examples
    return SyntheticCorpus(sets["unlabeled"], sets["weak"], sets["strong"], sets["test"],
                           lex, scheme, cfg)
