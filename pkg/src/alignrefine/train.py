"""Training loop: inverse-sqrt LR with warmup, Adam, gradient accumulation, checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .metrics import average_checkpoints
from .model import Batch, Dropout, Model, ModelConfig
from .numerics import NonFiniteError
from .refine import TrainStepReport, iteration_weights, training_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    batch_unit: str = "sequences"  # or "tokens": batch_size is a transcript-token budget
    lr_factor: float = 0.5
    warmup_steps: int = 400
    total_steps: int = 3000
    grad_accum: int = 1
    checkpoint_interval: int = 100
    average_last: int = 5
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    seed: int = 0
    objective: str = "align-refine"  # or "infill"
    infill_smoothing: float = 0.1
    # input augmentation: extra Gaussian feature noise and zeroed time spans
    augment_noise: float = 0.0
    time_masks: int = 0
    time_mask_width: int = 0

    def __post_init__(self):
        for name in ("batch_size", "warmup_steps", "total_steps", "grad_accum", "checkpoint_interval",
                     "average_last"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.augment_noise < 0 or self.time_masks < 0 or self.time_mask_width < 0:
            raise ValueError("augmentation settings must be non-negative")
        if self.lr_factor <= 0:
            raise ValueError("lr_factor must be positive")
        if self.batch_unit not in ("sequences", "tokens"):
            raise ValueError(f"unknown batch unit {self.batch_unit!r}")
        if self.objective not in ("align-refine", "infill"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: Path | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


def lr_at(step: int, cfg: TrainConfig, model_dim: int) -> float:
    """factor * d^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return cfg.lr_factor * model_dim**-0.5 * min(step**-0.5, step * cfg.warmup_steps**-1.5)


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, lr: float) -> None:
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], t: int) -> None:
        self.m = {k[2:]: v.copy() for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in state.items() if k.startswith("v/")}
        self.t = t


def clip_grad_norm(params: dict, max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and math.isfinite(norm) and norm > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


class BatchPlan:
    """Deterministic micro-batch schedule: a fresh permutation per epoch, keyed by seed."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig):
        self.dataset = dataset
        self.cfg = cfg
        self._epochs: list[list[list[int]]] = []

    def _epoch(self, e: int) -> list[list[int]]:
        while len(self._epochs) <= e:
            k = len(self._epochs)
            order = np.random.default_rng([self.cfg.seed, 7, k]).permutation(len(self.dataset))
            self._epochs.append(self._pack([int(i) for i in order]))
        return self._epochs[e]

    def _pack(self, order: list[int]) -> list[list[int]]:
        if self.cfg.batch_unit == "sequences":
            bs = self.cfg.batch_size
            return [order[i:i + bs] for i in range(0, len(order), bs)]
        batches, cur, tokens = [], [], 0
        for i in order:
            n = len(self.dataset[i].transcript)
            if cur and tokens + n > self.cfg.batch_size:
                batches.append(cur)
                cur, tokens = [], 0
            cur.append(i)
            tokens += n
        if cur:
            batches.append(cur)
        return batches

    def micro_batch(self, index: int) -> list[int]:
        e = 0
        while True:
            ep = self._epoch(e)
            if index < len(ep):
                return ep[index]
            index -= len(ep)
            e += 1

    def step_batches(self, step: int) -> list[list[int]]:
        a = self.cfg.grad_accum
        return [self.micro_batch((step - 1) * a + j) for j in range(a)]


@dataclass
class TrainResult:
    model: Model
    averaged: Checkpoint
    reports: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    snapshots: list[Checkpoint] = field(default_factory=list)


def augment(batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Perturb the valid frames of ``batch``; identity when augmentation is off."""
    if cfg.augment_noise == 0 and (cfg.time_masks == 0 or cfg.time_mask_width == 0):
        return batch
    feats = batch.feats.copy()
    valid = np.arange(feats.shape[1])[None, :] < batch.lengths[:, None]
    if cfg.augment_noise > 0:
        feats += rng.normal(scale=cfg.augment_noise, size=feats.shape) * valid[..., None]
    for b, n in enumerate(batch.lengths):
        for _ in range(cfg.time_masks if cfg.time_mask_width else 0):
            w = int(rng.integers(0, min(cfg.time_mask_width, int(n)) + 1))
            t0 = int(rng.integers(0, int(n) - w + 1))
            feats[b, t0:t0 + w] = 0.0
    return Batch(feats, batch.lengths, batch.targets)


def _step_loss(model: Model, batch: Batch, cfg: TrainConfig, drop: Dropout, denom: int,
               rng: np.random.Generator) -> TrainStepReport:
    if cfg.objective == "infill":
        from .infill import infill_training_step

        return infill_training_step(model, batch, drop, rng, denom, cfg.infill_smoothing)
    weights = iteration_weights(model.cfg.train_iterations, model.cfg.ctc_weight)
    return training_step(model, batch, weights, drop, denom, rng)


def run_training(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    dataset: Dataset,
    out_dir: str | Path | None = None,
    *,
    model: Model | None = None,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    on_report: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from scratch (or ``model``/``resume``) up to ``total_steps``.

    Every ``checkpoint_interval`` steps a snapshot is taken; the last
    ``average_last`` snapshots are averaged into the returned model.
    ``stop_at`` ends the run early (used to exercise resume).
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        model = resume.to_model()
    elif model is None:
        model = Model(model_cfg, seed=train_cfg.seed)
    model.set_trainable("infill." if train_cfg.objective == "infill" else ("enc.", "dec."))
    trainable = {k: p for k, p in model.params.items() if p.requires_grad}
    opt = Adam(train_cfg)
    start = 1
    if resume is not None:
        opt.load_state_dict(resume.optimizer, resume.step)
        start = resume.step + 1
    plan = BatchPlan(dataset, train_cfg)
    reports: list[dict] = []
    snapshots: list[Checkpoint] = []
    paths: list[Path] = []
    last_good: Path | None = None
    log_fh = open(out / "train_log.jsonl", "a", encoding="utf-8") if out is not None else None
    end = train_cfg.total_steps if stop_at is None else min(stop_at, train_cfg.total_steps)
    try:
        for step in range(start, end + 1):
            rng = np.random.default_rng([train_cfg.seed, 11, step])
            aug_rng = np.random.default_rng([train_cfg.seed, 13, step])
            drop = Dropout(rng, model.cfg.dropout_p)
            micro = plan.step_batches(step)
            denom = sum(len(m) for m in micro)
            model.zero_grad()
            parts = []
            try:
                for idx in micro:
                    batch = augment(Batch.from_records([dataset[i] for i in idx]), train_cfg, aug_rng)
                    parts.append(_step_loss(model, batch, train_cfg, drop, denom, rng))
            except NonFiniteError:
                raise TrainingDiverged(step, last_good) from None
            lr = lr_at(step, train_cfg, model.cfg.model_dim)
            gnorm = clip_grad_norm(trainable, train_cfg.clip_norm)
            if not math.isfinite(gnorm):
                raise TrainingDiverged(step, last_good)
            if any(p.applied for p in parts):
                opt.step(trainable, lr)
            rep = _merge_reports(parts)
            rec = {"step": step, "lr": lr, "grad_norm": gnorm, **rep.to_dict()}
            reports.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if on_report is not None:
                on_report(rec)
            if step % train_cfg.checkpoint_interval == 0 or step == end:
                ck = Checkpoint.from_model(
                    model, step=step, rng_state={"seed": train_cfg.seed, "next_step": step + 1},
                    provenance=[f"train:{train_cfg.objective}:seed{train_cfg.seed}"],
                    optimizer=opt.state_dict(), train_config=train_cfg.to_dict(),
                )
                if snapshots and snapshots[-1].step == step:
                    snapshots.pop()
                snapshots.append(ck)
                snapshots = snapshots[-train_cfg.average_last:]
                if out is not None:
                    last_good = ck.save(out / f"ckpt_{step:06d}.ckpt")
                    paths.append(last_good)
                    while len(paths) > train_cfg.average_last:
                        paths.pop(0).unlink(missing_ok=True)
    finally:
        if log_fh is not None:
            log_fh.close()
    for p in model.params.values():
        p.requires_grad = True
    if not snapshots:
        snapshots = [Checkpoint.from_model(model, step=start - 1)]
    averaged = average_checkpoints([_without_optimizer(s) for s in snapshots])
    if out is not None:
        averaged.save(out / "averaged.ckpt")
    return TrainResult(model, averaged, reports, paths, snapshots)


def _without_optimizer(ck: Checkpoint) -> Checkpoint:
    return Checkpoint(ck.config, ck.params, ck.step, ck.rng_state, ck.provenance, {}, ck.train_config)


def _merge_reports(parts: list[TrainStepReport]) -> TrainStepReport:
    n = [p.utterances - p.skipped for p in parts]
    tot = sum(n)

    def avg(vals):
        return float(sum(v * k for v, k in zip(vals, n)) / tot) if tot else float("nan")

    K = len(parts[0].refine)
    return TrainStepReport(
        total=avg([p.total for p in parts]),
        ctc=avg([p.ctc for p in parts]),
        refine=[avg([p.refine[k] for p in parts]) for k in range(K)],
        skipped=sum(p.skipped for p in parts),
        utterances=sum(p.utterances for p in parts),
    )
