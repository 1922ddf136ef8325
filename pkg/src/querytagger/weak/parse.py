"""Strict parser for ``token -> Category`` label responses."""
from __future__ import annotations

import re
from typing import Sequence

from ..corpus.schema import LabelScheme, categories_to_bio

_LINE = re.compile(r"^\s*(\S+)\s*->\s*(\S+)\s*$")


class ParseFailure(ValueError):
    """A response that does not label the query token for token."""

    def __init__(self, reason: str, response: str):
        super().__init__(reason)
        self.reason = reason
        self.response = response


def parse_labels(response: str, query: Sequence[str], scheme: LabelScheme) -> list[str]:
    """BIO tags for ``query`` from a response with one line per token.

    Lines must name the query tokens in order (case-insensitive); blank lines
    are ignored. Adjacent tokens of one category form a single span.
    """
    if not response or not response.strip():
        raise ParseFailure("empty response", response)
    names = {c.lower(): c for c in scheme.categories}
    outside = scheme.outside_name.lower()
    lines = [ln for ln in response.splitlines() if ln.strip()]
    if len(lines) != len(query):
        raise ParseFailure(f"{len(lines)} answer lines for {len(query)} query tokens", response)
    cats: list[str | None] = []
    for i, (line, tok) in enumerate(zip(lines, query)):
        m = _LINE.match(line)
        if m is None:
            raise ParseFailure(f"line {i + 1} is not 'token -> Category': {line!r}", response)
        word, cat = m.group(1), m.group(2).lower()
        if word.lower() != tok.lower():
            raise ParseFailure(f"line {i + 1} labels {word!r}, expected {tok!r}", response)
        if cat == outside:
            cats.append(None)
        elif cat in names:
            cats.append(names[cat])
        else:
            raise ParseFailure(f"line {i + 1}: unknown category {m.group(2)!r}", response)
    return categories_to_bio(cats)
