"""Simulated annotator noise for weak labels."""
from __future__ import annotations

from typing import Sequence

from .schema import LabelScheme, split_tag


def corrupt_labels(tags: Sequence[str], noise_rate: float, rng,
                   scheme: LabelScheme = LabelScheme()) -> list[str]:
    """Flip each token's category with probability ``noise_rate``.

    The outside class counts as a category, so ``O`` tokens can become entity
    tokens and vice versa. A flipped token picks uniformly among the other
    categories. The result is re-encoded so that it is always BIO well-formed:
    a token continues the previous entity only if it did so originally and the
    category still matches.
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError("noise_rate must be in [0, 1]")
    space = [None, *scheme.categories]
    out = []
    prev_cat = None
    for t in tags:
        prefix, cat = split_tag(t)
        if rng.random() < noise_rate:
            others = [c for c in space if c != cat]
            cat = others[int(rng.integers(len(others)))]
            prefix = "B" if cat is not None else "O"
        if cat is None:
            out.append("O")
        elif prefix == "I" and prev_cat == cat:
            out.append(f"I-{cat}")
        else:
            out.append(f"B-{cat}")
        prev_cat = cat
    return out
