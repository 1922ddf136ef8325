"""Perturbation-based regularization in embedding space.

The virtual loss compares the model's per-token distributions on a clean
input ``x`` and on ``x + delta``. Hard perturbations come from a few steps of
normalized projected gradient ascent on that loss; random ones are drawn
uniformly from the same norm ball.

Predictors are passed as plain callables mapping an input :class:`Tensor`
(batch first, feature last) to per-position class distributions, so the same
routines drive the tagger and small toy models.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from .corpus.augment import EncodedBatch
from .engine import Tensor
from .model import DropoutPlan, TaggerModel, supervised_loss

PROB_FLOOR = 1e-12
GRAD_FLOOR = 1e-12
NORMS = ("l2", "linf")

Predictor = Callable[[Tensor], Tensor]


@dataclass
class PerturbationConfig:
    epsilon: float = 1.0
    eta: float = 0.1
    steps: int = 3
    norm: str = "l2"
    init_scale: float = 1e-3
    perturb_titles: bool = True
    # "query": average the virtual loss over supervised positions only;
    # "all": over every non-padded position
    kl_positions: str = "query"
    loss_weight: float = 1.0

    def __post_init__(self):
        self.norm = self.norm.lower()
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        # zero radius and zero steps are accepted as degenerate settings
        if self.epsilon < 0 or self.eta <= 0 or self.steps < 0 or self.init_scale < 0:
            raise ValueError("need epsilon >= 0, eta > 0, steps >= 0, init_scale >= 0")
        if self.kl_positions not in ("query", "all"):
            raise ValueError("kl_positions must be 'query' or 'all'")

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class Perturbation:
    delta: np.ndarray
    norm: np.ndarray  # per example, in the configured norm

    @property
    def shape(self):
        return self.delta.shape


# ------------------------------------------------------------------ losses

def sym_kl(p, q, mask=None) -> Tensor:
    """Mean over selected positions of ``(KL(p||q) + KL(q||p)) / 2``.

    ``p`` and ``q`` hold distributions along the last axis; either may be a
    plain array (treated as constant). ``mask`` has shape ``p.shape[:-1]``.
    """
    p, q = E.as_tensor(p), E.as_tensor(q)
    if p.shape != q.shape:
        raise E.ShapeError(f"sym_kl: shapes {p.shape} and {q.shape} differ")
    # KL(p||q) + KL(q||p) = sum_c (p_c - q_c)(log p_c - log q_c)
    lp = E.log(E.clamp_min(p, PROB_FLOOR))
    lq = E.log(E.clamp_min(q, PROB_FLOOR))
    per_pos = E.sum((p - q) * (lp - lq), axis=-1)
    if mask is None:
        mask = np.ones(per_pos.shape)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != per_pos.shape:
        raise E.ShapeError(f"sym_kl: mask shape {mask.shape} != position shape {per_pos.shape}")
    total = mask.sum()
    if total <= 0:
        raise ValueError("sym_kl: mask selects no positions")
    return E.scale(E.sum(per_pos * mask), 0.5 / total)


def virtual_loss(predict: Predictor, x, delta, mask=None, clean=None) -> Tensor:
    """Divergence between ``predict(x)`` (held constant) and ``predict(x + delta)``."""
    x = E.as_tensor(x)
    if clean is None:
        with E.no_grad():
            clean = predict(Tensor(x.data)).data
    elif isinstance(clean, Tensor):
        clean = clean.data
    return sym_kl(clean, predict(x + delta), mask)


# -------------------------------------------------------------- projection

def _example_norms(d: np.ndarray, norm: str) -> np.ndarray:
    flat = d.reshape(d.shape[0], -1)
    if norm == "l2":
        return np.linalg.norm(flat, axis=1)
    return np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(d.shape[0])


def _broadcast_rows(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def _position_mask(valid, shape):
    """Expand a (batch, positions) mask to the full perturbation shape."""
    if valid is None:
        return None
    m = np.asarray(valid, dtype=np.float64)
    while m.ndim < len(shape):
        m = m[..., None]
    return m


def project(delta: np.ndarray, config: PerturbationConfig, valid=None) -> np.ndarray:
    """Project each example's perturbation onto the norm ball of radius epsilon.

    The first axis indexes examples. ``valid`` marks positions that may be
    perturbed; all others are reset to zero.
    """
    d = np.asarray(delta, dtype=np.float64)
    m = _position_mask(valid, d.shape)
    if m is not None:
        d = d * m
    eps = config.epsilon
    if config.norm == "linf":
        return np.clip(d, -eps, eps)
    n = _example_norms(d, "l2")
    factor = np.ones_like(n)
    big = n > eps
    factor[big] = eps / n[big]
    out = d * _broadcast_rows(factor, d.ndim)
    # rounding can leave a rescaled row an ulp outside the ball, and a second
    # projection would then move it again; shrink those rows until the
    # computed norm is within epsilon so the map is exactly idempotent
    over = _example_norms(out, "l2") > eps
    while over.any():
        factor[over] = np.nextafter(factor[over], 0.0)
        out = d * _broadcast_rows(factor, d.ndim)
        over = _example_norms(out, "l2") > eps
    return out


def _perturbation(delta, config):
    return Perturbation(delta, _example_norms(delta, config.norm))


# ------------------------------------------------------------------ search

def find_adversarial_perturbation(predict: Predictor, x, config: PerturbationConfig,
                                  rng: E.Rng, mask=None, valid=None,
                                  clean=None) -> Perturbation:
    """Projected gradient ascent on the virtual loss.

    ``predict`` must run in evaluation mode. Each example's ascent direction
    is its own gradient block scaled to unit L2 norm; examples whose gradient
    norm is below ``GRAD_FLOOR`` keep their current perturbation for that
    step. The predictor's parameters should be frozen by the caller (see
    :func:`frozen`) to avoid computing unused weight gradients.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if clean is None:
        with E.no_grad():
            clean = predict(Tensor(x)).data
    delta = project(config.init_scale * rng.normal(x.shape), config, valid)
    xt = Tensor(x)
    for _ in range(config.steps):
        d = Tensor(delta, requires_grad=True)
        loss = sym_kl(clean, predict(xt + d), mask)
        grads = E.backward(loss, accumulate=False)
        g = grads.get(d)
        if g is None:
            break
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in perturbation search")
        gn = _example_norms(g, "l2")
        active = gn >= GRAD_FLOOR
        if not active.any():
            continue
        scale = np.zeros_like(gn)
        scale[active] = config.eta / gn[active]
        delta = project(delta + g * _broadcast_rows(scale, g.ndim), config, valid)
    return _perturbation(delta, config)


def sample_virtual_perturbation(shape, config: PerturbationConfig, rng: E.Rng,
                                valid=None) -> Perturbation:
    """Uniform draw from the L2 ball or the Linf box, per example.

    With ``valid`` given, the ball lives in the subspace of valid positions,
    so every example's draw is uniform over the coordinates it may use.
    """
    shape = tuple(shape)
    eps = config.epsilon
    m = _position_mask(valid, shape)
    if config.norm == "linf":
        d = rng.uniform(size=shape, low=-eps, high=eps)
        return _perturbation(d if m is None else d * m, config)
    g = rng.normal(shape)
    if m is not None:
        g = g * m
    n = _example_norms(g, "l2")
    dims = (np.full(shape[0], np.prod(shape[1:]), dtype=np.float64) if m is None
            else np.broadcast_to(m, shape).reshape(shape[0], -1).sum(axis=1))
    u = rng.uniform(size=shape[0])
    radius = np.zeros(shape[0])
    ok = (n > 0) & (dims > 0)
    radius[ok] = eps * u[ok] ** (1.0 / dims[ok]) / n[ok]
    return _perturbation(g * _broadcast_rows(radius, g.ndim), config)


@contextlib.contextmanager
def frozen(params):
    """Temporarily exclude ``params`` from differentiation."""
    params = list(params)
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, r in zip(params, prev):
            p.requires_grad = r


# --------------------------------------------------------- tagger objective

@dataclass
class ObjectiveParts:
    total: Tensor
    supervised: Tensor
    virtual: Tensor | None
    perturbation: Perturbation | None


def _kl_mask(batch: EncodedBatch, config: PerturbationConfig) -> np.ndarray:
    if config.kl_positions == "query":
        return batch.loss_mask
    return batch.pad_mask


def _valid_positions(batch: EncodedBatch, config: PerturbationConfig) -> np.ndarray:
    if config.perturb_titles:
        return batch.pad_mask
    return batch.pad_mask * (batch.segment_ids == 0)


def regularized_objective(model: TaggerModel, batch: EncodedBatch, config: PerturbationConfig,
                          rng: E.Rng, mode: str = "adversarial",
                          dropout: DropoutPlan | None = None) -> ObjectiveParts:
    """Supervised loss plus the virtual loss at a chosen perturbation.

    ``mode`` is ``"vanilla"`` (no extra term), ``"virtual"`` (random in-ball
    perturbation) or ``"adversarial"`` (PGD). The clean distribution in the
    virtual term comes from the same dropout-masked pass as the supervised
    loss and is held constant; the perturbed pass replays the same masks, so
    a zero perturbation contributes exactly zero loss and zero gradient.
    """
    emb = model.embed(batch)
    logits = model.tag_logits(emb, dropout=dropout)
    sup = supervised_loss(logits, batch)
    if mode == "vanilla":
        return ObjectiveParts(sup, sup, None, None)
    mask = _kl_mask(batch, config)
    valid = _valid_positions(batch, config)
    if mode == "adversarial":
        with frozen(model.parameters()), E.no_grad():
            clean_eval = model.classify(Tensor(emb.x.data), batch.pad_mask).data
        with frozen(model.parameters()):
            pert = find_adversarial_perturbation(
                lambda z: model.classify(z, batch.pad_mask), emb.x.data, config, rng,
                mask=mask, valid=valid, clean=clean_eval)
    elif mode == "virtual":
        pert = sample_virtual_perturbation(emb.x.shape, config, rng, valid)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    clean = E.softmax(Tensor(logits.data)).data
    perturbed = model.classify(emb.x + pert.delta, batch.pad_mask, dropout=dropout)
    lv = sym_kl(clean, perturbed, mask)
    total = sup + E.scale(lv, config.loss_weight)
    return ObjectiveParts(total, sup, lv, pert)


def adversarial_objective(model: TaggerModel, batch: EncodedBatch, config: PerturbationConfig,
                          rng: E.Rng, dropout: DropoutPlan | None = None) -> Tensor:
    """Supervised loss plus the virtual loss at the PGD perturbation (held constant)."""
    return regularized_objective(model, batch, config, rng, "adversarial", dropout).total


def flip_rate(model: TaggerModel, batch: EncodedBatch, config: PerturbationConfig,
              rng: E.Rng, draws: int = 1) -> float:
    """Fraction of supervised positions whose argmax tag changes under random
    in-ball perturbations of the embedded input (evaluation mode)."""
    with E.no_grad():
        emb = model.embed(batch)
        base = model.tag_logits(emb).data.argmax(-1)
        mask = batch.loss_mask > 0
        flips = total = 0
        for i in range(draws):
            pert = sample_virtual_perturbation(emb.x.shape, config, rng.child(i),
                                               _valid_positions(batch, config))
            pred = model.tag_logits(Tensor(emb.x.data + pert.delta), batch.pad_mask).data.argmax(-1)
            flips += int(((pred != base) & mask).sum())
            total += int(mask.sum())
    return flips / total if total else 0.0
