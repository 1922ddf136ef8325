"""Transformer token tagger with a tagging head and a masked-token head.

Architecture: token + learned position + segment embeddings, a stack of
single-head pre-norm self-attention blocks, a final layer norm, then either
the tag classifier or the masked-token head (decoder tied to the token
embedding table).
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .corpus.augment import EncodedBatch
from .corpus.schema import IGNORE_INDEX, LabelScheme, Vocabulary
from .engine import Tensor

CHECKPOINT_MAGIC = b"QTAGCKPT"
CHECKPOINT_VERSION = 1
NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    num_tag_classes: int
    embed_dim: int = 64
    encoder_layers: int = 2
    ffn_dim: int = 128
    max_seq_len: int = 64
    dropout_rate: float = 0.1
    num_segments: int = 2
    activation: str = "relu"

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EmbeddedInput:
    """Continuous input to the encoder, shape (batch, length, embed_dim).

    Rows at padded positions are zero.
    """

    x: Tensor
    pad_mask: np.ndarray

    @property
    def shape(self):
        return self.x.shape


class DropoutPlan:
    """Dropout masks keyed by call site, drawn once and then replayed.

    Running two forward passes with the same plan applies identical masks,
    which lets the clean and perturbed branches of a step share their noise.
    """

    def __init__(self, rate: float, rng: E.Rng):
        self.rate = rate
        self.rng = rng
        self.masks: dict[str, np.ndarray] = {}

    def __call__(self, site: str, t: Tensor) -> Tensor:
        if self.rate <= 0.0:
            return t
        m = self.masks.get(site)
        if m is None or m.shape != t.shape:
            keep = self.rng.uniform(size=t.shape) >= self.rate
            m = keep / (1.0 - self.rate)
            self.masks[site] = m
        return E.mul(t, m)


def _identity(site, t):
    return t


_ACTIVATIONS = {"relu": E.relu, "gelu": E.gelu}


class TaggerModel:
    def __init__(self, config: ModelConfig, rng: E.Rng | None = None):
        if config.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {config.activation!r}")
        self.config = config
        rng = rng if rng is not None else E.Rng(0)
        d, c = config.embed_dim, config.num_tag_classes
        p: OrderedDict[str, Tensor] = OrderedDict()

        def normal(name, shape, std):
            p[name] = Tensor(rng.child("init", name).normal(shape, std), requires_grad=True)

        def const(name, shape, value):
            p[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

        emb_std = 1.0 / np.sqrt(d)
        normal("tok_emb", (config.vocab_size, d), emb_std)
        normal("pos_emb", (config.max_seq_len, d), emb_std)
        normal("seg_emb", (config.num_segments, d), emb_std)
        for i in range(config.encoder_layers):
            pre = f"layer{i}."
            const(pre + "ln1_g", (d,), 1.0)
            const(pre + "ln1_b", (d,), 0.0)
            for w in ("q", "k", "v", "o"):
                normal(pre + f"w{w}", (d, d), 1.0 / np.sqrt(d))
                const(pre + f"b{w}", (d,), 0.0)
            const(pre + "ln2_g", (d,), 1.0)
            const(pre + "ln2_b", (d,), 0.0)
            normal(pre + "w1", (d, config.ffn_dim), 1.0 / np.sqrt(d))
            const(pre + "b1", (config.ffn_dim,), 0.0)
            normal(pre + "w2", (config.ffn_dim, d), 1.0 / np.sqrt(config.ffn_dim))
            const(pre + "b2", (d,), 0.0)
        const("lnf_g", (d,), 1.0)
        const("lnf_b", (d,), 0.0)
        normal("cls_w", (d, c), 1.0 / np.sqrt(d))
        const("cls_b", (c,), 0.0)
        normal("mlm_w", (d, d), 1.0 / np.sqrt(d))
        const("mlm_b", (d,), 0.0)
        const("mlm_ln_g", (d,), 1.0)
        const("mlm_ln_b", (d,), 0.0)
        const("mlm_out_b", (config.vocab_size,), 0.0)
        self.params = p

    # ------------------------------------------------------------ parameters

    def parameters(self, prefix_filter=None) -> list[Tensor]:
        return [t for n, t in self.params.items()
                if prefix_filter is None or prefix_filter(n)]

    def tagging_parameters(self) -> list[Tensor]:
        return self.parameters(lambda n: not n.startswith("mlm_"))

    def pretraining_parameters(self) -> list[Tensor]:
        return self.parameters(lambda n: not n.startswith("cls_"))

    def state_dict(self) -> OrderedDict:
        return OrderedDict((n, t.data.copy()) for n, t in self.params.items())

    def load_state_dict(self, state):
        for n, t in self.params.items():
            if state[n].shape != t.shape:
                raise E.ShapeError(f"{n}: checkpoint shape {state[n].shape} != {t.shape}")
            t.data = np.array(state[n], dtype=np.float64)

    def copy(self) -> "TaggerModel":
        m = TaggerModel.__new__(TaggerModel)
        m.config = self.config
        m.params = OrderedDict((n, Tensor(t.data.copy(), requires_grad=True))
                               for n, t in self.params.items())
        return m

    # --------------------------------------------------------------- forward

    def embed(self, batch: EncodedBatch) -> EmbeddedInput:
        ids = batch.token_ids
        n, length = ids.shape
        cfg = self.config
        if length > cfg.max_seq_len:
            raise E.ShapeError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")
        bad = np.argwhere((ids < 0) | (ids >= cfg.vocab_size))
        if len(bad):
            r, c = bad[0]
            raise IndexError(f"token id {ids[r, c]} at batch row {r}, position {c} "
                             f"is outside the vocabulary of size {cfg.vocab_size}")
        p = self.params
        x = E.gather_rows(p["tok_emb"], ids)
        x = x + E.gather_rows(p["pos_emb"], np.arange(length))
        x = x + E.gather_rows(p["seg_emb"], batch.segment_ids)
        x = x * batch.pad_mask[:, :, None]
        return EmbeddedInput(x, batch.pad_mask)

    def encode(self, x: Tensor, pad_mask: np.ndarray, dropout=None) -> Tensor:
        cfg = self.config
        if x.ndim != 3 or x.shape[2] != cfg.embed_dim or x.shape[:2] != pad_mask.shape:
            raise E.ShapeError(f"encoder input shape {x.shape} does not match "
                               f"pad mask {pad_mask.shape} and embed_dim {cfg.embed_dim}")
        drop = dropout or _identity
        act = _ACTIVATIONS[cfg.activation]
        p = self.params
        bias = ((1.0 - pad_mask) * NEG_INF)[:, None, :]
        inv_sqrt_d = 1.0 / np.sqrt(cfg.embed_dim)
        h = x
        for i in range(cfg.encoder_layers):
            pre = f"layer{i}."
            a = E.layer_norm(h, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = E.linear(a, p[pre + "wq"], p[pre + "bq"])
            k = E.linear(a, p[pre + "wk"], p[pre + "bk"])
            v = E.linear(a, p[pre + "wv"], p[pre + "bv"])
            scores = E.scale(q @ E.transpose(k), inv_sqrt_d) + bias
            att = E.softmax(scores)
            o = E.linear(att @ v, p[pre + "wo"], p[pre + "bo"])
            h = h + drop(pre + "att", o)
            a = E.layer_norm(h, p[pre + "ln2_g"], p[pre + "ln2_b"])
            f = E.linear(act(E.linear(a, p[pre + "w1"], p[pre + "b1"])),
                         p[pre + "w2"], p[pre + "b2"])
            h = h + drop(pre + "ffn", f)
        return E.layer_norm(h, p["lnf_g"], p["lnf_b"])

    def tag_logits(self, x: EmbeddedInput | Tensor, pad_mask=None, dropout=None) -> Tensor:
        if isinstance(x, EmbeddedInput):
            x, pad_mask = x.x, x.pad_mask
        h = self.encode(x, pad_mask, dropout)
        return E.linear(h, self.params["cls_w"], self.params["cls_b"])

    def classify(self, x: EmbeddedInput | Tensor, pad_mask=None, dropout=None) -> Tensor:
        """Per-token tag distributions, shape (batch, length, num_tag_classes)."""
        return E.softmax(self.tag_logits(x, pad_mask, dropout))

    def mlm_logits(self, x: EmbeddedInput | Tensor, pad_mask=None, dropout=None) -> Tensor:
        if isinstance(x, EmbeddedInput):
            x, pad_mask = x.x, x.pad_mask
        p = self.params
        h = self.encode(x, pad_mask, dropout)
        t = _ACTIVATIONS[self.config.activation](E.linear(h, p["mlm_w"], p["mlm_b"]))
        t = E.layer_norm(t, p["mlm_ln_g"], p["mlm_ln_b"])
        return E.linear(t, E.transpose(p["tok_emb"]), p["mlm_out_b"])

    def mlm_distributions(self, x, pad_mask=None, dropout=None) -> Tensor:
        return E.softmax(self.mlm_logits(x, pad_mask, dropout))

    def predict(self, batch: EncodedBatch) -> np.ndarray:
        """Argmax tag ids, shape (batch, length), evaluation mode."""
        with E.no_grad():
            logits = self.tag_logits(self.embed(batch))
        return logits.data.argmax(axis=-1)


# ------------------------------------------------------------------ losses

def masked_cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions with nonzero weight.

    Positions whose target is ``IGNORE_INDEX`` or whose weight is 0 contribute
    neither loss nor gradient.
    """
    w = np.asarray(weights, dtype=np.float64) * (targets != IGNORE_INDEX)
    total = w.sum()
    if total <= 0:
        raise ValueError("empty supervision: loss mask selects no positions")
    picked = np.zeros(logits.shape)
    rows = np.nonzero(w)
    picked[rows + (targets[rows],)] = w[rows]
    lp = E.log_softmax(logits)
    return E.scale(E.sum(lp * picked), -1.0 / total)


def supervised_loss(logits: Tensor, batch: EncodedBatch) -> Tensor:
    return masked_cross_entropy(logits, batch.tag_ids, batch.loss_mask)


def probabilities_cross_entropy(probs: np.ndarray, batch: EncodedBatch) -> float:
    """Cross-entropy from explicit probabilities (no graph); used for checks."""
    w = batch.loss_mask * (batch.tag_ids != IGNORE_INDEX)
    rows = np.nonzero(w)
    p = probs[rows + (batch.tag_ids[rows],)]
    return float(-(np.log(np.maximum(p, 1e-300)) * w[rows]).sum() / w.sum())


# ------------------------------------------------------------- checkpoints

def save_checkpoint(model: TaggerModel, path, vocab: Vocabulary | None = None,
                    scheme: LabelScheme | None = None, meta: dict | None = None) -> None:
    """Write ``magic | u32 version | u32 header length | JSON header | float64 LE blobs``."""
    arrays = []
    offset = 0
    for name, t in model.params.items():
        nbytes = t.data.size * 8
        arrays.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "config": model.config.to_dict(),
        "arrays": arrays,
        "vocab": vocab.to_list() if vocab is not None else None,
        "scheme": scheme.to_dict() if scheme is not None else None,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for t in model.params.values():
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


@dataclass
class Checkpoint:
    model: TaggerModel
    vocab: Vocabulary | None
    scheme: LabelScheme | None
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a tagger checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    body = memoryview(raw)[16 + hlen:]
    model = TaggerModel.__new__(TaggerModel)
    model.config = ModelConfig.from_dict(header["config"])
    model.params = OrderedDict()
    for a in header["arrays"]:
        data = np.frombuffer(body[a["offset"]:a["offset"] + a["nbytes"]], dtype="<f8")
        model.params[a["name"]] = Tensor(data.reshape(a["shape"]).astype(np.float64),
                                         requires_grad=True)
    vocab = Vocabulary.from_list(header["vocab"]) if header.get("vocab") else None
    scheme = LabelScheme.from_dict(header["scheme"]) if header.get("scheme") else None
    return Checkpoint(model, vocab, scheme, header.get("meta", {}))
