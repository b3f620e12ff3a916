"""Joint CTC + iterative-refinement training and early-exit refinement decoding."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .ctc import collapse, ctc_batch_log_likelihood, forced_alignment, greedy_alignment
from .model import NO_DROPOUT, Batch, Dropout, EncoderOutput, Model
from .numerics import Tensor


@dataclass(frozen=True)
class IterationWeights:
    """Loss weights: ``ctc`` on the encoder head, ``refine[k]`` on refinement iteration k+1."""

    ctc: float
    refine: tuple[float, ...]

    @property
    def K(self) -> int:
        return len(self.refine)


def iteration_weights(K: int, ctc_weight: float) -> IterationWeights:
    """Spread ``1 - ctc_weight`` over K iterations with the first three times the others."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not 0.0 < ctc_weight < 1.0:
        raise ValueError(f"ctc_weight must lie in (0, 1), got {ctc_weight}")
    rest = 1.0 - ctc_weight
    if K == 1:
        return IterationWeights(ctc_weight, (rest,))
    r = rest / (K + 2)
    return IterationWeights(ctc_weight, (rest - (K - 1) * r,) + (r,) * (K - 1))


@dataclass
class TrainStepReport:
    total: float
    ctc: float
    refine: list[float]
    skipped: int
    utterances: int

    @property
    def applied(self) -> bool:
        return self.skipped < self.utterances

    def to_dict(self) -> dict:
        return {"total": self.total, "ctc": self.ctc, "refine": list(self.refine),
                "skipped": self.skipped, "utterances": self.utterances}


def batch_greedy(logp: np.ndarray, frame_lengths: np.ndarray, blank: int) -> np.ndarray:
    """Greedy alignments for a padded (B, T', V) batch; padded frames are blank."""
    a = np.argmax(logp, axis=-1).astype(np.int64)
    a[np.arange(a.shape[1])[None, :] >= np.asarray(frame_lengths)[:, None]] = blank
    return a


def _smoothing_term(logp: Tensor, frame_lengths: np.ndarray) -> Tensor:
    """Per-utterance mean over frames of KL(uniform || row), up to the constant -log V."""
    B, T, V = logp.shape
    valid = (np.arange(T)[None, :] < frame_lengths[:, None]) / frame_lengths[:, None]
    return nx.mul(nx.sum_(nx.mul(logp, nx.constant(valid[:, :, None] / V)), axis=(1, 2)), -1.0)


def batch_sample(logp: np.ndarray, frame_lengths: np.ndarray, blank: int,
                 rng: np.random.Generator) -> np.ndarray:
    """One alignment per utterance drawn frame-wise from ``exp(logp)``; padded frames are blank."""
    cdf = np.cumsum(np.exp(logp), axis=-1)
    u = rng.random(logp.shape[:2])[..., None] * cdf[..., -1:]
    a = np.minimum((cdf < u).sum(axis=-1), logp.shape[-1] - 1).astype(np.int64)
    a[np.arange(a.shape[1])[None, :] >= np.asarray(frame_lengths)[:, None]] = blank
    return a


def compute_loss(model: Model, batch: Batch, weights: IterationWeights, drop: Dropout = NO_DROPOUT,
                 denom: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[Tensor | None, TrainStepReport]:
    """Total loss (sum over reachable utterances / ``denom``) and its report.

    Refinement iteration k re-predicts the alignment from the argmax
    alignment of stage k-1 (with ``feedback="sample"`` the encoder's
    alignment is instead drawn frame-wise from its distribution). That choice
    is discrete, so no gradient reaches stage k-1 through it.
    """
    cfg = model.cfg
    blank = cfg.vocab.blank_id
    B = batch.feats.shape[0]
    denom = B if denom is None else denom
    enc = model.encoder_forward(batch, drop)
    lens = enc.frame_lengths
    ll0, ok = ctc_batch_log_likelihood(enc.logp, lens, batch.targets, blank)
    n_ok = int(ok.sum())
    stage_ll = [ll0]
    stage_logp = [enc.logp]
    if cfg.feedback == "teacher":
        prev = _teacher_alignments(enc, batch, ok, cfg.vocab)
    elif cfg.feedback == "sample":
        prev = batch_sample(enc.logp.data, lens, blank, np.random.default_rng(0) if rng is None else rng)
    else:
        prev = batch_greedy(enc.logp.data, lens, blank)
    for _ in range(weights.K):
        logp = model.decoder_forward(prev, enc, drop)
        llk, _ = ctc_batch_log_likelihood(logp, lens, batch.targets, blank)
        stage_ll.append(llk)
        stage_logp.append(logp)
        if cfg.feedback != "teacher":
            prev = batch_greedy(logp.data, lens, blank)

    stage_w = (weights.ctc,) + weights.refine
    means = [float(-ll.data[ok].sum() / max(n_ok, 1)) for ll in stage_ll]
    report = TrainStepReport(
        total=float(sum(w * m for w, m in zip(stage_w, means))),
        ctc=means[0], refine=means[1:], skipped=B - n_ok, utterances=B,
    )
    if n_ok == 0:
        return None, report
    scale = nx.constant(ok / denom)
    total = None
    for w, ll, logp in zip(stage_w, stage_ll, stage_logp):
        term = nx.mul(ll, -w)
        if cfg.ctc_smoothing:
            term = nx.add(term, nx.mul(_smoothing_term(logp, lens), w * cfg.ctc_smoothing))
        total = term if total is None else nx.add(total, term)
    return nx.sum_(nx.mul(total, scale)), report


def _teacher_alignments(enc: EncoderOutput, batch: Batch, ok: np.ndarray, vocab) -> np.ndarray:
    a = batch_greedy(enc.logp.data, enc.frame_lengths, vocab.blank_id)
    for b in np.flatnonzero(ok):
        n = int(enc.frame_lengths[b])
        a[b, :n] = forced_alignment(enc.logp.data[b, :n], batch.targets[b], vocab)
    return a


def training_step(model: Model, batch: Batch, weights: IterationWeights, drop: Dropout = NO_DROPOUT,
                  denom: int | None = None, rng: np.random.Generator | None = None) -> TrainStepReport:
    """Forward, loss and backward; gradients accumulate into parameter ``.grad``."""
    loss, report = compute_loss(model, batch, weights, drop, denom, rng)
    if loss is not None:
        nx.backward(loss)
    return report


# decoding ---------------------------------------------------------------------

@dataclass
class RefinementTrace:
    alignments: list[np.ndarray]
    hypotheses: list[list[int]]
    exit_iteration: int
    k_max: int
    converged: bool
    iteration_seconds: list[float] = field(default_factory=list)

    @property
    def hypothesis(self) -> list[int]:
        return self.hypotheses[-1]

    @property
    def exited_early(self) -> bool:
        return self.exit_iteration < self.k_max


def decode(model: Model, features: np.ndarray, k_max: int, exit_on: str = "alignment",
           early_exit: bool = True) -> RefinementTrace:
    """Encoder greedy alignment, then up to ``k_max`` refinement passes.

    Stops as soon as two consecutive alignments are identical (frame-exact,
    or identical after collapse with ``exit_on="collapse"``). With
    ``early_exit=False`` all ``k_max`` passes run; the output is unchanged
    since a fixed point stays fixed, only the compute differs.
    """
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    if exit_on not in ("alignment", "collapse"):
        raise ValueError(f"unknown exit criterion {exit_on!r}")
    v = model.cfg.vocab
    batch = Batch.single(features)
    with nx.no_grad():
        t0 = time.perf_counter()
        enc = model.encoder_forward(batch)
        a = greedy_alignment(enc.logp.data[0])
        secs = [time.perf_counter() - t0]
        alignments = [a]
        hyps = [collapse(a, v)]
        exit_k, converged = 0, False
        for k in range(1, k_max + 1):
            t0 = time.perf_counter()
            a = greedy_alignment(model.decoder_forward(a[None], enc).data[0])
            secs.append(time.perf_counter() - t0)
            alignments.append(a)
            hyps.append(collapse(a, v))
            exit_k = k
            same = np.array_equal(a, alignments[-2]) if exit_on == "alignment" else hyps[-1] == hyps[-2]
            if same and not converged:
                converged = True
                if early_exit:
                    break
    return RefinementTrace(alignments, hyps, exit_k, k_max, converged, secs)


@dataclass
class IterationEdit:
    iteration: int
    frame_edits: int
    null_edit: bool
    reversals: int


def refinement_edit_report(trace: RefinementTrace, blank: int = 0) -> list[IterationEdit]:
    """Per consecutive pair: frames changed, whether the collapse stayed the same despite
    changes (a null edit), and how many non-blank frames were rewritten (reversals)."""
    out = []
    for k in range(1, len(trace.alignments)):
        prev, cur = trace.alignments[k - 1], trace.alignments[k]
        diff = prev != cur
        edits = int(diff.sum())
        out.append(IterationEdit(
            iteration=k,
            frame_edits=edits,
            null_edit=edits > 0 and trace.hypotheses[k] == trace.hypotheses[k - 1],
            reversals=int((diff & (prev != blank)).sum()),
        ))
    return out
