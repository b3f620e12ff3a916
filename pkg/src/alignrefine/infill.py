"""Mask-CTC style infilling baseline.

The greedy CTC hypothesis is fixed in length; low-confidence tokens are
masked and filled in over K decoder passes. Committed tokens are never
revised, which is exactly what iterative realignment relaxes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .ctc import collapse, greedy_alignment, token_confidences
from .model import NO_DROPOUT, Batch, Dropout, EncoderOutput, Model
from .refine import TrainStepReport

DEFAULT_THRESHOLD = 0.9


@dataclass
class MaskedHypothesis:
    tokens: list[int]
    confidences: list[float]
    iteration: int = 0
    mask_id: int = -1
    encoder: EncoderOutput | None = field(default=None, repr=False)
    history: list[list[int]] = field(default_factory=list)

    @property
    def masked(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if t == self.mask_id]


def initial_mask(model: Model, features: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
                 reduce: str = "max") -> MaskedHypothesis:
    """Greedy CTC collapse of the encoder output with low-confidence tokens masked."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be a probability")
    v = model.cfg.vocab
    with nx.no_grad():
        enc = model.encoder_forward(Batch.single(features))
    logp = enc.logp.data[0]
    a = greedy_alignment(logp)
    tokens = collapse(a, v)
    conf = token_confidences(logp, a, v, reduce=reduce)
    return mask_tokens(tokens, conf, threshold, model.mask_id, enc)


def mask_tokens(tokens, confidences, threshold: float, mask_id: int, enc=None) -> MaskedHypothesis:
    masked = [mask_id if c < threshold else t for t, c in zip(tokens, confidences)]
    return MaskedHypothesis(masked, list(confidences), 0, mask_id, enc, [list(masked)])


def unmask_schedule(m: int, K: int) -> list[int]:
    """Tokens to commit at each of the K passes: ceil(remaining / passes left)."""
    out = []
    left = m
    for k in range(K):
        n = math.ceil(left / (K - k)) if left else 0
        out.append(n)
        left -= n
    return out


def infill_decode(model: Model, hyp: MaskedHypothesis, K: int) -> list[int]:
    """Run exactly K passes (none if nothing is masked) and return the filled sequence.

    ``hyp`` is updated in place; ``hyp.history`` records the tokens after each pass.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if hyp.encoder is None:
        raise ValueError("hypothesis carries no encoder states")
    if not hyp.masked:
        return list(hyp.tokens)
    label_ids = np.asarray(model.cfg.vocab.label_ids)
    schedule = unmask_schedule(len(hyp.masked), K)
    n_tok = len(hyp.tokens)
    for k, n_commit in enumerate(schedule, start=1):
        with nx.no_grad():
            logp = model.infill_forward(np.asarray(hyp.tokens)[None], [n_tok], hyp.encoder).data[0]
        probs = np.exp(logp[:, label_ids])
        best = label_ids[np.argmax(probs, axis=1)]
        conf = probs.max(axis=1)
        masked = hyp.masked
        # stable sort: ties commit the leftmost position first
        order = sorted(masked, key=lambda i: -conf[i])[:n_commit]
        for i in order:
            hyp.tokens[i] = int(best[i])
            hyp.confidences[i] = float(conf[i])
        hyp.iteration = k
        hyp.history.append(list(hyp.tokens))
    return list(hyp.tokens)


def infill_training_step(model: Model, batch: Batch, drop: Dropout = NO_DROPOUT,
                         rng: np.random.Generator | None = None, denom: int | None = None,
                         smoothing: float = 0.1) -> TrainStepReport:
    """Masked-token cross-entropy with label smoothing; the encoder is consumed, not trained."""
    rng = np.random.default_rng(0) if rng is None else rng
    B = len(batch.targets)
    denom = B if denom is None else denom
    with nx.no_grad():
        enc = model.encoder_forward(batch)
    lens = np.array([len(y) for y in batch.targets])
    N = int(lens.max())
    tokens = np.full((B, N), model.cfg.vocab.blank_id, dtype=np.int64)
    targets = np.full((B, N), model.cfg.vocab.label_ids[0], dtype=np.int64)
    weight = np.zeros((B, N))
    for b, y in enumerate(batch.targets):
        n = len(y)
        targets[b, :n] = y
        tokens[b, :n] = y
        k = int(rng.integers(1, n + 1))
        pos = rng.choice(n, size=k, replace=False)
        tokens[b, pos] = model.mask_id
        weight[b, pos] = 1.0 / k
    logp = model.infill_forward(tokens, lens, enc, drop)
    label_ids = np.asarray(model.cfg.vocab.label_ids)
    nll = nx.mul(nx.take_last(logp, targets), -(1.0 - smoothing))
    smooth_w = np.zeros(logp.shape[-1])
    smooth_w[label_ids] = smoothing / len(label_ids)
    uni = nx.mul(nx.sum_(nx.mul(logp, nx.constant(smooth_w)), axis=-1), -1.0)
    per_pos = nx.add(nll, uni)
    loss = nx.mul(nx.sum_(nx.mul(per_pos, nx.constant(weight))), 1.0 / denom)
    nx.backward(loss)
    mean = float((per_pos.data * weight).sum() / B)
    return TrainStepReport(total=mean, ctc=0.0, refine=[mean], skipped=0, utterances=B)
