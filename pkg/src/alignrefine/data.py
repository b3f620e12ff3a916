"""Deterministic synthetic transduction corpora and their on-disk format.

Each label has a fixed random prototype vector; an utterance renders every
token of its transcript as a run of noisy copies of that prototype, with
optional silence (zero-vector) gaps in between.
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ctc import Vocabulary, min_alignment_length
from .model import subsampled_length

DATASET_SCHEMA = "alignrefine.dataset/1"
_CONSONANTS = "kmnprstbdgfhlvwz"
_VOWELS = "aeiou"


def syllable_labels(n: int) -> tuple[str, ...]:
    """``n`` distinct two-letter labels ("ka", "ma", ...) so character rates are meaningful."""
    if n > len(_CONSONANTS) * len(_VOWELS):
        raise ValueError(f"at most {len(_CONSONANTS) * len(_VOWELS)} labels supported")
    return tuple(c + v for v in _VOWELS for c in _CONSONANTS)[:n]


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 16
    transcript_length: tuple[int, int] = (3, 8)
    frames_per_token: tuple[int, int] = (4, 8)
    gap_prob: float = 0.2
    gap_length: tuple[int, int] = (1, 4)
    noise_sigma: float = 0.5
    feature_dim: int = 16
    seed: int = 0
    count: int = 100
    max_retries: int = 20

    def __post_init__(self):
        for name in ("transcript_length", "frames_per_token", "gap_length"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (int(lo), int(hi)))
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be an ordered non-negative range, got {(lo, hi)}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.transcript_length[0] < 1:
            raise ValueError("transcripts must have at least one token")
        if self.frames_per_token[0] * self.transcript_length[0] < 4:
            raise ValueError("frames_per_token.min * transcript_length.min must be >= 4")
        if not 0.0 <= self.gap_prob <= 1.0:
            raise ValueError("gap_prob must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("transcript_length", "frames_per_token", "gap_length"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(syllable_labels(self.vocab_size))


@dataclass
class DatasetRecord:
    uid: str
    features: np.ndarray
    transcript: list[int]


@dataclass
class Dataset:
    vocab: Vocabulary
    records: list[DatasetRecord]
    spec: SyntheticSpec | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def subset(self, idx) -> Dataset:
        return Dataset(self.vocab, [self.records[i] for i in idx], self.spec, dict(self.meta))


def prototypes(spec: SyntheticSpec) -> np.ndarray:
    """(|L'|, feature_dim) prototypes; the blank row is the silence vector (zeros)."""
    rng = np.random.default_rng([spec.seed, 0x5EED])
    v = spec.vocabulary()
    protos = np.zeros((v.size, spec.feature_dim))
    protos[v.label_ids] = rng.normal(0.0, 1.0, size=(spec.vocab_size, spec.feature_dim))
    return protos


def _render(rng: np.random.Generator, y: list[int], protos: np.ndarray, spec: SyntheticSpec):
    fmin, fmax = spec.frames_per_token
    gmin, gmax = spec.gap_length
    rows = []
    for i, tok in enumerate(y):
        if i > 0:
            repeat = tok == y[i - 1]
            if repeat or rng.random() < spec.gap_prob:
                # a repeated label needs a silence run that survives 4x subsampling
                floor = 4 if repeat else 1
                n = int(rng.integers(max(gmin, floor), max(gmax, floor) + 1))
                rows.append(np.zeros((n, spec.feature_dim)))
        d = int(rng.integers(fmin, fmax + 1))
        rows.append(np.repeat(protos[tok][None], d, axis=0))
    clean = np.concatenate(rows, axis=0)
    return clean + rng.normal(0.0, spec.noise_sigma, size=clean.shape) if spec.noise_sigma else clean


def generate_record(spec: SyntheticSpec, index: int, protos: np.ndarray | None = None) -> DatasetRecord:
    """Record ``index`` of the corpus; depends only on (spec, index)."""
    protos = prototypes(spec) if protos is None else protos
    v = spec.vocabulary()
    rng = np.random.default_rng([spec.seed, 1, index])
    n = int(rng.integers(spec.transcript_length[0], spec.transcript_length[1] + 1))
    labels = np.asarray(v.label_ids)
    y = [int(t) for t in labels[rng.integers(0, len(labels), size=n)]]
    for _ in range(spec.max_retries):
        feats = _render(rng, y, protos, spec)
        if subsampled_length(feats.shape[0]) >= min_alignment_length(y):
            return DatasetRecord(f"utt{index:06d}", feats, y)
    raise ValueError(
        f"record {index}: transcript of {n} tokens unreachable after {spec.max_retries} renderings; "
        "raise frames_per_token"
    )


def generate_dataset(spec: SyntheticSpec) -> Dataset:
    protos = prototypes(spec)
    records = [generate_record(spec, i, protos) for i in range(spec.count)]
    return Dataset(spec.vocabulary(), records, spec)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """JSON header line, then one JSON line per record with base64 float64 features."""
    header = {
        "schema": DATASET_SCHEMA,
        "vocab": ds.vocab.to_dict(),
        "spec": None if ds.spec is None else ds.spec.to_dict(),
        "count": len(ds.records),
        "meta": ds.meta,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for r in ds.records:
        feats = np.ascontiguousarray(r.features, dtype="<f8")
        lines.append(json.dumps({
            "id": r.uid,
            "transcript": [int(t) for t in r.transcript],
            "shape": list(feats.shape),
            "features": base64.b64encode(feats.tobytes()).decode("ascii"),
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("schema") != DATASET_SCHEMA:
        raise ValueError(f"{path}: unsupported schema {header.get('schema')!r}, expected {DATASET_SCHEMA}")
    records = []
    for line in lines[1:]:
        d = json.loads(line)
        feats = np.frombuffer(base64.b64decode(d["features"]), dtype="<f8").reshape(d["shape"]).copy()
        records.append(DatasetRecord(d["id"], feats, list(d["transcript"])))
    if len(records) != header["count"]:
        raise ValueError(f"{path}: header count {header['count']} != {len(records)} records")
    spec = SyntheticSpec.from_dict(header["spec"]) if header.get("spec") else None
    return Dataset(Vocabulary.from_dict(header["vocab"]), records, spec, header.get("meta", {}))
