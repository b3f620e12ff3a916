"""Transformer encoder/decoder with a 4x convolutional frontend, on top of :mod:`numerics`."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .ctc import Vocabulary
from .numerics import ShapeError, Tensor

NEG_INF_MASK = -1e30


@dataclass
class ModelConfig:
    vocab: Vocabulary
    feature_dim: int = 16
    enc_layers: int = 4
    dec_layers: int = 2
    model_dim: int = 64
    heads: int = 2
    ffn_dim: int = 128
    dropout_p: float = 0.1
    conv_channels: int = 8
    train_iterations: int = 4
    ctc_weight: float = 0.3
    activation: str = "relu"
    tie_heads: bool = False
    # previous-alignment source during training: "greedy" (argmax), "sample" or "teacher"
    feedback: str = "greedy"
    # weight of a per-frame KL-to-uniform smoothing term on the CTC objectives
    ctc_smoothing: float = 0.0
    infill_layers: int | None = None

    def __post_init__(self):
        if isinstance(self.vocab, dict):
            self.vocab = Vocabulary.from_dict(self.vocab)
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.train_iterations < 1:
            raise ValueError("train_iterations (K) must be >= 1")
        if not 0.0 < self.ctc_weight < 1.0:
            raise ValueError(f"ctc_weight must lie in (0, 1), got {self.ctc_weight}")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4 for the two stride-2 reductions")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.feedback not in ("greedy", "sample", "teacher"):
            raise ValueError(f"unknown feedback mode {self.feedback!r}")
        if self.infill_layers is None:
            self.infill_layers = self.dec_layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = self.vocab.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def subsampled_length(t: int) -> int:
    """Frames left after two stride-2 convolutions with padding 1: ceil(ceil(t/2)/2)."""
    if t < 1:
        raise ValueError("input must have at least one frame")
    return -(-(-(-t // 2)) // 2)


def sinusoid_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


class Dropout:
    """Samples keep-masks for the model's dropout sites from a caller-owned RNG."""

    def __init__(self, rng: np.random.Generator | None, p: float):
        self.rng = rng
        self.p = p

    def __call__(self, x: Tensor) -> Tensor:
        if self.rng is None or self.p == 0.0:
            return x
        return nx.dropout(x, self.rng.random(x.shape) >= self.p, self.p)


NO_DROPOUT = Dropout(None, 0.0)


@dataclass
class Batch:
    """Padded features plus per-utterance lengths and targets."""

    feats: np.ndarray
    lengths: np.ndarray
    targets: list[list[int]] = field(default_factory=list)

    @classmethod
    def from_records(cls, records) -> Batch:
        lens = np.array([r.features.shape[0] for r in records], dtype=np.int64)
        fdim = records[0].features.shape[1]
        feats = np.zeros((len(records), int(lens.max()), fdim))
        for i, r in enumerate(records):
            feats[i, : lens[i]] = r.features
        return cls(feats, lens, [list(r.transcript) for r in records])

    @classmethod
    def single(cls, features: np.ndarray) -> Batch:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ShapeError(f"feature matrix must be (T>=1, F), got {features.shape}")
        return cls(features[None], np.array([features.shape[0]]), [])

    @property
    def frame_lengths(self) -> np.ndarray:
        return np.array([subsampled_length(int(t)) for t in self.lengths], dtype=np.int64)


@dataclass
class EncoderOutput:
    states: Tensor
    logp: Tensor
    frame_lengths: np.ndarray

    @property
    def key_mask(self) -> np.ndarray:
        return _key_mask(self.frame_lengths, self.states.shape[1])


def _key_mask(lengths: np.ndarray, n: int) -> np.ndarray:
    """Additive (B, 1, 1, n) attention mask hiding padded keys."""
    valid = np.arange(n)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, NEG_INF_MASK)[:, None, None, :]


class Model:
    """Parameter store plus forward passes for the encoder, refiner and infill decoder."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))
        self.counters: Counter = Counter()

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self, prefix: str = ""):
        return [(k, v) for k, v in self.params.items() if k.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_trainable(self, prefix: str | tuple[str, ...] | None) -> None:
        """Mark parameters under ``prefix`` trainable, all others frozen (None: all trainable)."""
        for k, p in self.params.items():
            p.requires_grad = prefix is None or k.startswith(prefix)

    # blocks ---------------------------------------------------------------
    def _linear(self, x: Tensor, name: str) -> Tensor:
        return nx.linear(x, self.params[name + ".w"], self.params[name + ".b"])

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return nx.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _act(self, x: Tensor) -> Tensor:
        return nx.relu(x) if self.cfg.activation == "relu" else nx.gelu(x)

    def _attention(self, xq: Tensor, xkv: Tensor | None, mask: np.ndarray | None, name: str,
                   drop: Dropout) -> Tensor:
        """Multi-head attention; ``xkv=None`` means self-attention over ``xq``."""
        B, Tq, D = xq.shape
        H = self.cfg.heads
        dh = D // H
        if xkv is None:
            Tk = Tq
            qkv = self._linear(xq, name + ".qkv").reshape(B, Tq, 3, H, dh)
            q = qkv[:, :, 0].transpose(0, 2, 1, 3)
            k = qkv[:, :, 1].transpose(0, 2, 3, 1)
            v = qkv[:, :, 2].transpose(0, 2, 1, 3)
        else:
            Tk = xkv.shape[1]
            q = self._linear(xq, name + ".q").reshape(B, Tq, H, dh).transpose(0, 2, 1, 3)
            kv = self._linear(xkv, name + ".kv").reshape(B, Tk, 2, H, dh)
            k = kv[:, :, 0].transpose(0, 2, 3, 1)
            v = kv[:, :, 1].transpose(0, 2, 1, 3)
        scores = nx.mul(nx.matmul(q, k), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = nx.add(scores, nx.constant(mask))
        attn = drop(nx.softmax(scores))
        ctx = nx.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Tq, D)
        return self._linear(ctx, name + ".o")

    def _ffn(self, x: Tensor, name: str, drop: Dropout) -> Tensor:
        return self._linear(drop(self._act(self._linear(x, name + ".1"))), name + ".2")

    def _encoder_layer(self, x: Tensor, mask: np.ndarray, name: str, drop: Dropout) -> Tensor:
        h = self._ln(x, name + ".ln1")
        x = x + drop(self._attention(h, None, mask, name + ".att", drop))
        return x + drop(self._ffn(self._ln(x, name + ".ln2"), name + ".ffn", drop))

    def _decoder_layer(self, x, self_mask, enc: EncoderOutput, name: str, drop: Dropout) -> Tensor:
        h = self._ln(x, name + ".ln1")
        x = x + drop(self._attention(h, None, self_mask, name + ".self", drop))
        x = x + drop(self._attention(self._ln(x, name + ".ln2"), enc.states, enc.key_mask, name + ".src", drop))
        return x + drop(self._ffn(self._ln(x, name + ".ln3"), name + ".ffn", drop))

    def _head(self, x: Tensor, name: str) -> Tensor:
        if self.cfg.tie_heads and name == "dec.head":
            name = "enc.head"
        return nx.log_softmax(self._linear(x, name))

    # forward passes -------------------------------------------------------
    def conv_frontend(self, batch: Batch, drop: Dropout = NO_DROPOUT) -> Tensor:
        """(B, T, F) features -> (B, ceil(ceil(T/2)/2), model_dim) with positions added."""
        if batch.feats.shape[-1] != self.cfg.feature_dim:
            raise ShapeError(f"feature dim {batch.feats.shape[-1]} != config {self.cfg.feature_dim}")
        if batch.feats.shape[1] == 0 or (batch.lengths < 1).any():
            raise ValueError("utterances must have at least one frame")
        B, T, _ = batch.feats.shape
        x = nx.constant(batch.feats[:, None])
        half = -(-batch.lengths // 2)
        x = nx.relu(nx.conv2d(x, self["enc.conv1.w"], self["enc.conv1.b"], stride=2, padding=1))
        x = nx.mul(x, nx.constant(_time_mask(half, x.shape[2])[:, None, :, None]))
        x = nx.relu(nx.conv2d(x, self["enc.conv2.w"], self["enc.conv2.b"], stride=2, padding=1))
        out_len = batch.frame_lengths
        x = nx.mul(x, nx.constant(_time_mask(out_len, x.shape[2])[:, None, :, None]))
        _, C, Tp, Fp = x.shape
        x = x.transpose(0, 2, 1, 3).reshape(B, Tp, C * Fp)
        x = self._linear(x, "enc.proj")
        x = nx.add(x, nx.constant(sinusoid_positions(Tp, self.cfg.model_dim)))
        return drop(x)

    def encoder_forward(self, batch: Batch, drop: Dropout = NO_DROPOUT) -> EncoderOutput:
        x = self.conv_frontend(batch, drop)
        lens = batch.frame_lengths
        mask = _key_mask(lens, x.shape[1])
        for i in range(self.cfg.enc_layers):
            x = self._encoder_layer(x, mask, f"enc.{i}", drop)
        self.counters["enc_layer_passes"] += self.cfg.enc_layers * x.shape[0]
        self.counters["encoder_calls"] += x.shape[0]
        x = self._ln(x, "enc.ln")
        return EncoderOutput(x, self._head(x, "enc.head"), lens)

    def decoder_forward(self, alignments: np.ndarray, enc: EncoderOutput, drop: Dropout = NO_DROPOUT) -> Tensor:
        """Re-predict every frame given a (B, T') alignment; returns (B, T', |L'|) log-probs."""
        alignments = np.asarray(alignments, dtype=np.int64)
        if alignments.ndim == 1:
            alignments = alignments[None]
        if alignments.shape != enc.states.shape[:2]:
            raise ShapeError(f"alignment shape {alignments.shape} != encoder frames {enc.states.shape[:2]}")
        B, Tp = alignments.shape
        x = nx.embedding(self["dec.embed"], alignments)
        x = drop(nx.add(x, nx.constant(sinusoid_positions(Tp, self.cfg.model_dim))))
        mask = enc.key_mask
        for i in range(self.cfg.dec_layers):
            x = self._decoder_layer(x, mask, enc, f"dec.{i}", drop)
        self.counters["dec_layer_passes"] += self.cfg.dec_layers * B
        self.counters["decoder_calls"] += B
        x = self._ln(x, "dec.ln")
        return self._head(x, "dec.head")

    def infill_forward(self, tokens: np.ndarray, token_lengths, enc: EncoderOutput,
                       drop: Dropout = NO_DROPOUT) -> Tensor:
        """Token-level masked prediction; ``tokens`` (B, N) may contain :attr:`mask_id`."""
        tokens = np.asarray(tokens, dtype=np.int64)
        B, N = tokens.shape
        x = nx.embedding(self["infill.embed"], tokens)
        x = drop(nx.add(x, nx.constant(sinusoid_positions(N, self.cfg.model_dim))))
        mask = _key_mask(np.asarray(token_lengths), N)
        for i in range(self.cfg.infill_layers):
            x = self._decoder_layer(x, mask, enc, f"infill.{i}", drop)
        self.counters["infill_layer_passes"] += self.cfg.infill_layers * B
        x = self._ln(x, "infill.ln")
        return self._head(x, "infill.head")

    @property
    def mask_id(self) -> int:
        return self.cfg.vocab.size


def _time_mask(lengths: np.ndarray, n: int) -> np.ndarray:
    return (np.arange(n)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


# initialization ---------------------------------------------------------------

def _xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    D, V, C = cfg.model_dim, cfg.vocab.size, cfg.conv_channels
    p: dict[str, np.ndarray] = {}

    def lin(name, i, o):
        p[name + ".w"] = _xavier(rng, i, o)
        p[name + ".b"] = np.zeros(o)

    def ln(name):
        p[name + ".g"] = np.ones(D)
        p[name + ".b"] = np.zeros(D)

    def self_attn(name):
        p[name + ".qkv.w"] = np.concatenate([_xavier(rng, D, D) for _ in range(3)], axis=1)
        p[name + ".qkv.b"] = np.zeros(3 * D)
        lin(name + ".o", D, D)

    def cross_attn(name):
        lin(name + ".q", D, D)
        p[name + ".kv.w"] = np.concatenate([_xavier(rng, D, D) for _ in range(2)], axis=1)
        p[name + ".kv.b"] = np.zeros(2 * D)
        lin(name + ".o", D, D)

    def dec_block(name):
        ln(name + ".ln1")
        self_attn(name + ".self")
        ln(name + ".ln2")
        cross_attn(name + ".src")
        ln(name + ".ln3")
        lin(name + ".ffn.1", D, cfg.ffn_dim)
        lin(name + ".ffn.2", cfg.ffn_dim, D)

    p["enc.conv1.w"] = rng.normal(0, math.sqrt(2.0 / 9), size=(C, 1, 3, 3))
    p["enc.conv1.b"] = np.zeros(C)
    p["enc.conv2.w"] = rng.normal(0, math.sqrt(2.0 / (9 * C)), size=(C, C, 3, 3))
    p["enc.conv2.b"] = np.zeros(C)
    fp = subsampled_length(cfg.feature_dim)
    lin("enc.proj", C * fp, D)
    for i in range(cfg.enc_layers):
        ln(f"enc.{i}.ln1")
        self_attn(f"enc.{i}.att")
        ln(f"enc.{i}.ln2")
        lin(f"enc.{i}.ffn.1", D, cfg.ffn_dim)
        lin(f"enc.{i}.ffn.2", cfg.ffn_dim, D)
    ln("enc.ln")
    lin("enc.head", D, V)

    p["dec.embed"] = rng.normal(0, 1.0, size=(V, D))
    for i in range(cfg.dec_layers):
        dec_block(f"dec.{i}")
    ln("dec.ln")
    if not cfg.tie_heads:
        lin("dec.head", D, V)

    p["infill.embed"] = rng.normal(0, 1.0, size=(V + 1, D))
    for i in range(cfg.infill_layers):
        dec_block(f"infill.{i}")
    ln("infill.ln")
    lin("infill.head", D, V)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}
