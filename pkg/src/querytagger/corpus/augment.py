"""Title augmentation, batch encoding and masked-token corruption."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .schema import (IGNORE_INDEX, MASK_ID, PAD_ID, SEP, LabelScheme,
                     QueryExample, Vocabulary)

N_RESERVED = 4


@dataclass
class Augmented:
    tokens: list[str]
    loss_mask: list[int]
    segment_ids: list[int]


def augment_with_titles(example: QueryExample, k: int, max_len: int | None = None) -> Augmented:
    """``query [SEP] title_1 [SEP] title_2 ...`` using the first ``k`` titles.

    Only query positions carry loss weight. Sequences longer than ``max_len``
    are cut from the right, so titles go before any query token does.
    """
    if k < 0:
        raise ValueError("title count must be >= 0")
    tokens = list(example.query)
    segs = [0] * len(tokens)
    for title in example.titles[:k]:
        tokens.append(SEP)
        tokens.extend(title)
        segs.extend([1] * (len(title) + 1))
    mask = [1] * len(example.query) + [0] * (len(tokens) - len(example.query))
    if max_len is not None and len(tokens) > max_len:
        tokens, mask, segs = tokens[:max_len], mask[:max_len], segs[:max_len]
    return Augmented(tokens, mask, segs)


def strip_titles(aug: Augmented) -> list[str]:
    return [t for t, s in zip(aug.tokens, aug.segment_ids) if s == 0]


@dataclass
class EncodedExample:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    loss_mask: np.ndarray
    tag_ids: np.ndarray


@dataclass
class EncodedBatch:
    """Padded batch. All arrays are (batch, length)."""

    token_ids: np.ndarray
    pad_mask: np.ndarray
    segment_ids: np.ndarray
    loss_mask: np.ndarray
    tag_ids: np.ndarray

    @property
    def shape(self):
        return self.token_ids.shape

    def __len__(self):
        return self.token_ids.shape[0]


def encode_example(example: QueryExample, vocab: Vocabulary, scheme: LabelScheme,
                   k: int, max_len: int | None = None) -> EncodedExample:
    aug = augment_with_titles(example, k, max_len)
    ids = np.array(vocab.encode(aug.tokens), dtype=np.int64)
    mask = np.array(aug.loss_mask, dtype=np.float64)
    tags = np.full(len(ids), IGNORE_INDEX, dtype=np.int64)
    if example.tags is not None:
        nq = int(mask.sum())
        tags[:nq] = [scheme.tag_id(t) for t in example.tags[:nq]]
    else:
        mask[:] = 0.0
    return EncodedExample(ids, np.array(aug.segment_ids, dtype=np.int64), mask, tags)


def collate(items: Sequence[EncodedExample]) -> EncodedBatch:
    n = len(items)
    width = max((len(it.token_ids) for it in items), default=0)
    width = max(width, 1)
    ids = np.full((n, width), PAD_ID, dtype=np.int64)
    pad = np.zeros((n, width))
    seg = np.zeros((n, width), dtype=np.int64)
    loss = np.zeros((n, width))
    tags = np.full((n, width), IGNORE_INDEX, dtype=np.int64)
    for i, it in enumerate(items):
        m = len(it.token_ids)
        ids[i, :m] = it.token_ids
        pad[i, :m] = 1.0
        seg[i, :m] = it.segment_ids
        loss[i, :m] = it.loss_mask
        tags[i, :m] = it.tag_ids
    return EncodedBatch(ids, pad, seg, loss, tags)


def encode_batch(examples: Sequence[QueryExample], vocab: Vocabulary, scheme: LabelScheme,
                 k: int, max_len: int | None = None) -> EncodedBatch:
    return collate([encode_example(ex, vocab, scheme, k, max_len) for ex in examples])


def mask_batch(token_ids: np.ndarray, valid: np.ndarray, rng, vocab_size: int,
               prob: float = 0.15):
    """Masked-token corruption of a padded id matrix.

    Each valid position is selected with probability ``prob``; selected
    positions become ``[MASK]`` (80%), a random non-reserved token (10%) or
    stay unchanged (10%). Rows with no selection get one forced uniformly.
    Returns ``(masked_ids, target_ids, selected)``; targets are
    ``IGNORE_INDEX`` outside the selection.
    """
    token_ids = np.asarray(token_ids)
    valid = np.asarray(valid) > 0
    if not valid.any(axis=1).all():
        raise ValueError("every sequence needs at least one token to mask")
    u = rng.uniform(size=token_ids.shape)
    selected = (u < prob) & valid
    for r in np.flatnonzero(~selected.any(axis=1)):
        cols = np.flatnonzero(valid[r])
        selected[r, cols[int(rng.integers(len(cols)))]] = True
    action = rng.uniform(size=token_ids.shape)
    random_ids = rng.integers(N_RESERVED, max(vocab_size, N_RESERVED + 1), size=token_ids.shape)
    masked = token_ids.copy()
    to_mask = selected & (action < 0.8)
    to_rand = selected & (action >= 0.8) & (action < 0.9)
    masked[to_mask] = MASK_ID
    masked[to_rand] = random_ids[to_rand]
    targets = np.where(selected, token_ids, IGNORE_INDEX)
    return masked, targets, selected


def mask_for_mlm(tokens: Sequence[int], rng, vocab_size: int, prob: float = 0.15):
    """Single-sequence form of :func:`mask_batch`; returns positions as an index array."""
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    masked, targets, sel = mask_batch(ids, np.ones_like(ids), rng, vocab_size, prob)
    return masked[0], targets[0], np.flatnonzero(sel[0])


class TitleFetcher:
    """Source of search-result titles for a query.

    No live crawler ships with the package; subclass and implement
    :meth:`fetch` to plug one in.
    """

    def fetch(self, query: Sequence[str], k: int) -> list[list[str]]:
        raise NotImplementedError("no title source configured")


def attach_titles(examples: Sequence[QueryExample], fetcher: TitleFetcher, k: int):
    return [QueryExample(ex.query, fetcher.fetch(ex.query, k), ex.tags, ex.quality, ex.source)
            for ex in examples]
