"""CTC alphabet, collapse, alignment enumeration, DP likelihood and greedy decoding."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .numerics import ShapeError, Tensor, _make, reshape

BLANK_SYMBOL = "_"
ENUMERATION_BUDGET = 10**7
MAX_ENUMERATION_FRAMES = 12


@dataclass(frozen=True)
class Vocabulary:
    """Labels plus a blank; ids index the extended alphabet.

    The blank takes id ``blank_id`` and labels fill the remaining ids in order.
    """

    labels: tuple[str, ...]
    blank_id: int = 0

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(set(labels)) != len(labels):
            raise ValueError("vocabulary labels must be distinct")
        if BLANK_SYMBOL in labels:
            raise ValueError(f"{BLANK_SYMBOL!r} is reserved for the blank")
        if not 0 <= self.blank_id <= len(labels):
            raise ValueError(f"blank_id {self.blank_id} outside [0, {len(labels)}]")

    @property
    def size(self) -> int:
        """|L'|, the extended alphabet size."""
        return len(self.labels) + 1

    @property
    def symbols(self) -> list[str]:
        out = list(self.labels)
        out.insert(self.blank_id, BLANK_SYMBOL)
        return out

    @property
    def label_ids(self) -> list[int]:
        return [i for i in range(self.size) if i != self.blank_id]

    def id_of(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(f"unknown symbol {symbol!r}") from None

    def symbol_of(self, idx: int) -> str:
        if not 0 <= idx < self.size:
            raise IndexError(f"id {idx} outside [0, {self.size})")
        return self.symbols[idx]

    def encode(self, symbols: Iterable[str]) -> list[int]:
        return [self.id_of(s) for s in symbols]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbol_of(int(i)) for i in ids]

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "blank_id": self.blank_id}

    @classmethod
    def from_dict(cls, d: dict) -> Vocabulary:
        return cls(tuple(d["labels"]), int(d.get("blank_id", 0)))


def _check_ids(ids: Sequence[int], v: Vocabulary) -> None:
    for i in ids:
        if not 0 <= int(i) < v.size:
            raise ValueError(f"id {int(i)} outside extended alphabet of size {v.size}")


def collapse(a: Sequence[int], v: Vocabulary) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    _check_ids(a, v)
    out: list[int] = []
    prev = None
    for x in a:
        x = int(x)
        if x != prev and x != v.blank_id:
            out.append(x)
        prev = x
    return out


def min_alignment_length(y: Sequence[int]) -> int:
    """Frames needed to emit ``y``: one per label plus a blank between equal neighbours."""
    return len(y) + sum(1 for p, q in zip(y, y[1:]) if p == q)


def is_reachable(y: Sequence[int], t_frames: int) -> bool:
    return min_alignment_length(y) <= t_frames


def enumerate_alignments(y: Sequence[int], t_frames: int, v: Vocabulary) -> set[tuple[int, ...]]:
    """Brute-force psi(y): every length-``t_frames`` string over L' collapsing to ``y``."""
    if t_frames > MAX_ENUMERATION_FRAMES or v.size**t_frames > ENUMERATION_BUDGET:
        raise ValueError(
            f"enumeration budget exceeded: |L'|^T = {v.size}^{t_frames} "
            f"(limits T <= {MAX_ENUMERATION_FRAMES}, |L'|^T <= {ENUMERATION_BUDGET})"
        )
    target = [int(i) for i in y]
    if v.blank_id in target:
        raise ValueError("target contains the blank")
    if not is_reachable(target, t_frames):
        return set()
    return {
        a for a in itertools.product(range(v.size), repeat=t_frames)
        if collapse(a, v) == target
    }


def _as_logprob_array(p) -> np.ndarray:
    arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"log-prob matrix must be (T, |L'|), got {arr.shape}")
    return arr


def check_normalized(p, atol: float = 1e-9) -> None:
    arr = _as_logprob_array(p)
    m = arr.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(arr - m).sum(axis=-1, keepdims=True)))[:, 0]
    if np.abs(lse).max() > atol:
        raise ValueError(f"rows are not normalized log-distributions (max |lse| = {np.abs(lse).max():.3g})")


def ctc_batch_log_likelihood(
    logp: Tensor, frame_lengths: Sequence[int], targets: Sequence[Sequence[int]], blank: int
) -> tuple[Tensor, np.ndarray]:
    """Per-utterance CTC log-likelihoods for a padded (B, T, V) batch.

    Returns the (B,) likelihood tensor and a boolean reachability mask; an
    unreachable utterance contributes 0 with zero gradient.
    """
    if logp.ndim != 3 or len(frame_lengths) != logp.shape[0] or len(targets) != logp.shape[0]:
        raise ShapeError(
            f"ctc: logp {logp.shape}, {len(frame_lengths)} lengths, {len(targets)} targets"
        )
    B = logp.shape[0]
    lls = np.zeros(B)
    ok = np.zeros(B, dtype=bool)
    grads = np.zeros_like(logp.data)
    for b in range(B):
        n = int(frame_lengths[b])
        y = np.asarray(targets[b], dtype=np.int64)
        if not is_reachable(list(y), n):
            continue
        ll, g = kernels.ctc_forward_backward(logp.data[b, :n], y, blank)
        if ll == -math.inf:
            continue
        lls[b] = ll
        ok[b] = True
        grads[b, :n] = g

    def bw(gout):
        return (grads * gout[:, None, None],)

    return _make(lls, (logp,), bw, "ctc"), ok


def ctc_log_likelihood(p, y: Sequence[int], v: Vocabulary):
    """log p(y|x), marginalized over all alignments by the forward DP.

    Returns a differentiable scalar Tensor, or ``-math.inf`` (a float) when
    ``y`` cannot be emitted in the available frames.
    """
    arr = _as_logprob_array(p)
    check_normalized(arr)
    if arr.shape[1] != v.size:
        raise ShapeError(f"log-prob width {arr.shape[1]} != |L'| = {v.size}")
    y = [int(i) for i in y]
    if v.blank_id in y:
        raise ValueError("target contains the blank")
    _check_ids(y, v)
    if not is_reachable(y, arr.shape[0]):
        return -math.inf
    t = p if isinstance(p, Tensor) else Tensor(arr)
    lls, _ = ctc_batch_log_likelihood(reshape(t, (1,) + t.shape), [t.shape[0]], [y], v.blank_id)
    return reshape(lls, ())


def greedy_alignment(p) -> np.ndarray:
    """Per-frame argmax; ties go to the lowest id."""
    arr = _as_logprob_array(p)
    return np.argmax(arr, axis=-1).astype(np.int64)


def token_runs(a: Sequence[int], v: Vocabulary) -> list[tuple[int, int, int]]:
    """(label, start, stop) for each collapsed token's frame run."""
    runs = []
    start = 0
    for t in range(1, len(a) + 1):
        if t == len(a) or a[t] != a[start]:
            if a[start] != v.blank_id:
                runs.append((int(a[start]), start, t))
            start = t
    return runs


def token_confidences(p, a: Sequence[int], v: Vocabulary, reduce: str = "max") -> list[float]:
    """One probability per collapsed token, reduced over the frames of its run."""
    arr = _as_logprob_array(p)
    if len(a) != arr.shape[0]:
        raise ShapeError(f"alignment length {len(a)} != frame count {arr.shape[0]}")
    fn = {"max": np.max, "min": np.min, "mean": np.mean}[reduce]
    return [
        float(fn(np.exp(arr[s:e, lab]))) for lab, s, e in token_runs(list(map(int, a)), v)
    ]


def forced_alignment(p, y: Sequence[int], v: Vocabulary) -> np.ndarray:
    """Most probable alignment in psi(y) (Viterbi over the blank-interleaved lattice)."""
    arr = _as_logprob_array(p)
    T = arr.shape[0]
    y = [int(i) for i in y]
    if not is_reachable(y, T):
        raise ValueError(f"target of {len(y)} labels unreachable in {T} frames")
    ext = [v.blank_id]
    for lab in y:
        ext += [lab, v.blank_id]
    S = len(ext)
    score = np.full((T, S), -np.inf)
    back = np.zeros((T, S), dtype=np.int64)
    score[0, 0] = arr[0, ext[0]]
    if S > 1:
        score[0, 1] = arr[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            cands = [(score[t - 1, s], s)]
            if s >= 1:
                cands.append((score[t - 1, s - 1], s - 1))
            if s >= 2 and ext[s] != v.blank_id and ext[s] != ext[s - 2]:
                cands.append((score[t - 1, s - 2], s - 2))
            best, arg = max(cands, key=lambda c: (c[0], -c[1]))
            score[t, s] = best + arr[t, ext[s]]
            back[t, s] = arg
    s = S - 1 if S == 1 or score[T - 1, S - 1] >= score[T - 1, S - 2] else S - 2
    path = np.zeros(T, dtype=np.int64)
    for t in range(T - 1, -1, -1):
        path[t] = ext[s]
        s = back[t, s]
    return path
