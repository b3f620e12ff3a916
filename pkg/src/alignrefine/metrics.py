"""Error rates, real-time-factor accounting and checkpoint averaging."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .checkpoint import Checkpoint, CheckpointError

DEFAULT_FRAME_SHIFT = 0.01


@dataclass(frozen=True)
class EditStats:
    substitutions: int
    deletions: int
    insertions: int
    ref_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        if self.ref_length == 0:
            raise ZeroDivisionError("error rate undefined for an empty reference")
        return self.errors / self.ref_length

    def __add__(self, other: EditStats) -> EditStats:
        return EditStats(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_length + other.ref_length,
        )


def edit_distance(ref: Sequence, hyp: Sequence) -> EditStats:
    """Levenshtein alignment of ``hyp`` against ``ref``; substitutions win ties."""
    symbols: dict = {}
    r = [symbols.setdefault(x, len(symbols)) for x in ref]
    h = [symbols.setdefault(x, len(symbols)) for x in hyp]
    s, d, i = kernels.edit_ops(r, h)
    return EditStats(s, d, i, len(r))


def corpus_stats(pairs: Iterable[tuple[Sequence, Sequence]]) -> EditStats:
    total = None
    for ref, hyp in pairs:
        st = edit_distance(ref, hyp)
        total = st if total is None else total + st
    if total is None:
        raise ValueError("empty corpus")
    return total


def corpus_wer(pairs: Iterable[tuple[Sequence, Sequence]]) -> float:
    """Pooled rate: total errors over total reference length."""
    return corpus_stats(pairs).rate


def corpus_cer(pairs: Iterable[tuple[Sequence[str], Sequence[str]]]) -> float:
    """Character rate over the concatenated symbol strings of each pair."""
    return corpus_wer(("".join(r), "".join(h)) for r, h in pairs)


@dataclass
class LatencyReport:
    wall_seconds: float
    audio_seconds: float
    per_iteration_seconds: list[float] = field(default_factory=list)
    threads: int = 1

    def __post_init__(self):
        if self.audio_seconds <= 0:
            raise ValueError("audio duration must be positive")

    @property
    def rtf(self) -> float:
        return self.wall_seconds / self.audio_seconds

    @classmethod
    def from_frames(cls, wall_seconds: float, frames: int, frame_shift: float = DEFAULT_FRAME_SHIFT,
                    **kw) -> LatencyReport:
        return cls(wall_seconds, frames * frame_shift, **kw)

    def to_dict(self) -> dict:
        return {"wall_seconds": self.wall_seconds, "audio_seconds": self.audio_seconds, "rtf": self.rtf,
                "per_iteration_seconds": list(self.per_iteration_seconds), "threads": self.threads}


def measure_rtf(decode_one: Callable[[np.ndarray], object], features: Sequence[np.ndarray],
                frame_shift: float = DEFAULT_FRAME_SHIFT) -> tuple[LatencyReport, list]:
    """Time ``decode_one`` over every utterance on a single BLAS thread.

    Only the decode calls are inside the timed region. If the results carry
    ``iteration_seconds`` they are summed into a per-iteration breakdown.
    """
    frames = sum(int(f.shape[0]) for f in features)
    if frames == 0:
        raise ValueError("zero-duration corpus")
    results = []
    wall = 0.0
    with threadpool_limits(limits=1):
        for f in features:
            t0 = time.perf_counter()
            results.append(decode_one(f))
            wall += time.perf_counter() - t0
    breakdown: list[float] = []
    for r in results:
        for k, s in enumerate(getattr(r, "iteration_seconds", []) or []):
            if k == len(breakdown):
                breakdown.append(0.0)
            breakdown[k] += s
    return LatencyReport.from_frames(wall, frames, frame_shift, per_iteration_seconds=breakdown), results


def average_checkpoints(items: Sequence[str | Path | Checkpoint]) -> Checkpoint:
    """Per-parameter arithmetic mean; configs must agree exactly."""
    if not items:
        raise ValueError("need at least one checkpoint")
    ckpts = [c if isinstance(c, Checkpoint) else Checkpoint.load(c) for c in items]
    first = ckpts[0]
    for c in ckpts[1:]:
        if c.schema != first.schema:
            raise CheckpointError(f"schema mismatch: {c.schema!r} vs {first.schema!r}")
        for f in fields(first.config):
            a, b = getattr(first.config, f.name), getattr(c.config, f.name)
            if a != b:
                raise CheckpointError(f"config mismatch in field {f.name!r}: {a!r} vs {b!r}")
        if set(c.params) != set(first.params):
            raise CheckpointError("parameter names differ between checkpoints")
    n = len(ckpts)
    params = {}
    for name in first.params:
        acc = np.zeros_like(first.params[name])
        for c in ckpts:
            acc += c.params[name]
        params[name] = acc / n
    provenance = []
    for i, (c, item) in enumerate(zip(ckpts, items)):
        src = str(item) if not isinstance(item, Checkpoint) else f"<in-memory #{i}>"
        provenance.append(f"{src}@step{c.step}")
    return Checkpoint(first.config, params, step=max(c.step for c in ckpts),
                      rng_state=dict(last_rng_state(ckpts)), provenance=["average"] + provenance,
                      train_config=dict(first.train_config))


def last_rng_state(ckpts: Sequence[Checkpoint]) -> dict:
    return max(ckpts, key=lambda c: c.step).rng_state
