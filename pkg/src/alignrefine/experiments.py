"""Evaluation runs and the encoder/decoder depth-reallocation ablation.

Both produce a single JSON report with an explicit schema, a hash of the
configuration that produced it, and a provenance string.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .ctc import collapse, greedy_alignment
from .data import Dataset
from .infill import DEFAULT_THRESHOLD, infill_decode, initial_mask
from .metrics import DEFAULT_FRAME_SHIFT, corpus_cer, corpus_wer, measure_rtf
from .model import Model, ModelConfig
from .refine import decode, refinement_edit_report
from .train import TrainConfig, run_training

log = logging.getLogger(__name__)

EVAL_SCHEMA = "alignrefine.eval/1"
ABLATION_SCHEMA = "alignrefine.ablation/1"
FAMILIES = ("align-refine", "infilling", "ctc-greedy")


class UnknownFamilyError(ValueError):
    pass


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def _ctc_greedy(model: Model, features: np.ndarray) -> dict:
    from . import numerics as nx
    from .model import Batch

    with nx.no_grad():
        enc = model.encoder_forward(Batch.single(features))
    return {"hyp": collapse(greedy_alignment(enc.logp.data[0]), model.cfg.vocab), "exit": 0, "null": 0}


def _align_refine(model: Model, features: np.ndarray, k: int) -> dict:
    tr = decode(model, features, k)
    nulls = sum(e.null_edit for e in refinement_edit_report(tr, model.cfg.vocab.blank_id))
    return {"hyp": tr.hypothesis, "exit": tr.exit_iteration, "null": nulls,
            "iteration_seconds": tr.iteration_seconds}


def _infilling(model: Model, features: np.ndarray, k: int, threshold: float) -> dict:
    hyp = initial_mask(model, features, threshold)
    if k == 0 or not hyp.masked:
        # no passes: masked slots fall back to the greedy token underneath
        enc_tokens = _ctc_greedy(model, features)["hyp"]
        return {"hyp": enc_tokens, "exit": 0, "null": 0}
    out = infill_decode(model, hyp, k)
    return {"hyp": out, "exit": hyp.iteration, "null": 0}


class _Result(dict):
    """Decode result that exposes per-iteration timings to :func:`measure_rtf`."""

    @property
    def iteration_seconds(self):
        return self.get("iteration_seconds", [])


def decode_corpus(model: Model, dataset: Dataset, k: int, family: str,
                  threshold: float = DEFAULT_THRESHOLD, timing: bool = True):
    """Decode every record; returns (results, LatencyReport or None)."""
    if family not in FAMILIES:
        raise UnknownFamilyError(f"unknown decoder family {family!r}; expected one of {FAMILIES}")
    if family == "align-refine":
        def one(f):
            return _Result(_align_refine(model, f, k))
    elif family == "infilling":
        def one(f):
            return _Result(_infilling(model, f, k, threshold))
    else:
        def one(f):
            return _Result(_ctc_greedy(model, f))
    feats = [r.features for r in dataset.records]
    if timing:
        report, results = measure_rtf(one, feats, DEFAULT_FRAME_SHIFT)
        return results, report
    return [one(f) for f in feats], None


def evaluate(model: Model, dataset: Dataset, k_list: Sequence[int], families: Sequence[str],
             threshold: float = DEFAULT_THRESHOLD, timing: bool = True) -> list[dict]:
    """Metric rows keyed by (family, k)."""
    for fam in families:
        if fam not in FAMILIES:
            raise UnknownFamilyError(f"unknown decoder family {fam!r}; expected one of {FAMILIES}")
    if not k_list or any(k < 0 for k in k_list):
        raise ValueError("k_list must be a non-empty list of non-negative integers")
    v = model.cfg.vocab
    rows = []
    for fam in families:
        for k in k_list:
            results, latency = decode_corpus(model, dataset, k, fam, threshold, timing)
            refs = [r.transcript for r in dataset.records]
            hyps = [r["hyp"] for r in results]
            rows.append({
                "family": fam,
                "k": int(k),
                "wer": corpus_wer(zip(refs, hyps)),
                "cer": corpus_cer((v.decode(r), v.decode(h)) for r, h in zip(refs, hyps)),
                "mean_exit_iteration": float(np.mean([r["exit"] for r in results])),
                "null_edits": int(sum(r["null"] for r in results)),
                "rtf": None if latency is None else latency.rtf,
                "latency": None if latency is None else latency.to_dict(),
                "utterances": len(results),
            })
    return rows


def run_eval(checkpoint: str | Path | Checkpoint, dataset: Dataset, k_list: Sequence[int],
             decoder_family: str | Sequence[str] = "align-refine", out_path: str | Path | None = None,
             threshold: float = DEFAULT_THRESHOLD, timing: bool = True) -> dict:
    """Evaluate a checkpoint and optionally write the report file.

    With ``timing=False`` no wall-clock quantity enters the report, so the
    file is byte-reproducible for a fixed checkpoint and dataset.
    """
    families = [decoder_family] if isinstance(decoder_family, str) else list(decoder_family)
    for fam in families:
        if fam not in FAMILIES:
            raise UnknownFamilyError(f"unknown decoder family {fam!r}; expected one of {FAMILIES}")
    if isinstance(checkpoint, Checkpoint):
        ck, source = checkpoint, "in-memory"
    else:
        ck, source = Checkpoint.load(checkpoint), f"{Path(checkpoint).name}@{_file_digest(checkpoint)}"
    model = ck.to_model()
    rows = evaluate(model, dataset, k_list, families, threshold, timing)
    settings = {"k_list": [int(k) for k in k_list], "families": families, "threshold": threshold,
                "frame_shift": DEFAULT_FRAME_SHIFT}
    report = {
        "schema": EVAL_SCHEMA,
        "config_hash": config_hash(ck.config.to_dict(), settings, dataset.meta,
                                   dataset.spec.to_dict() if dataset.spec else {}),
        "provenance": f"ckpt:{source} step:{ck.step} " + " ".join(ck.provenance),
        "settings": settings,
        "dataset": {"utterances": len(dataset), "spec": dataset.spec.to_dict() if dataset.spec else None},
        "metrics": rows,
    }
    if out_path is not None:
        write_report(report, out_path)
    return report


def write_report(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def layer_pass_audit(model: Model, dataset: Dataset, k: int, early_exit: bool = True) -> dict:
    """Check the instrumented counters against enc_layers + exit_iteration * dec_layers per decode."""
    mismatches = 0
    total = 0
    for r in dataset.records:
        before = dict(model.counters)
        tr = decode(model, r.features, k, early_exit=early_exit)
        enc = model.counters["enc_layer_passes"] - before.get("enc_layer_passes", 0)
        dec = model.counters["dec_layer_passes"] - before.get("dec_layer_passes", 0)
        expected = model.cfg.enc_layers + tr.exit_iteration * model.cfg.dec_layers
        total += enc + dec
        mismatches += int(enc + dec != expected or enc != model.cfg.enc_layers)
    return {"utterances": len(dataset), "layer_passes": total, "mismatches": mismatches}


def timed_decode(model: Model, dataset: Dataset, k: int, repeats: int = 3, early_exit: bool = False):
    """Best-of-``repeats`` single-thread wall time for a fixed-budget decode of the corpus."""
    feats = [r.features for r in dataset.records]
    best = None
    for _ in range(max(1, repeats)):
        rep, _ = measure_rtf(lambda f: decode(model, f, k, early_exit=early_exit), feats)
        if best is None or rep.wall_seconds < best.wall_seconds:
            best = rep
    return best


def run_depth_ablation(total_layers: int, splits: Sequence[tuple[int, int]], train_cfg: TrainConfig,
                       model_cfg: ModelConfig, train_set: Dataset, test_set: Dataset,
                       k_list: Sequence[int] = (0, 1, 3), timing_k: int = 3, repeats: int = 3,
                       out_dir: str | Path | None = None) -> dict:
    """Train each (enc, dec) split on identical data and seed, then compare WER and RTF.

    RTF is measured at a fixed budget of ``timing_k`` passes (no early exit)
    so that every split does the same number of refinement iterations.
    """
    if not splits:
        raise ValueError("splits must be non-empty")
    for e, d in splits:
        if e + d != total_layers:
            raise ValueError(f"split ({e}, {d}) does not sum to {total_layers} layers")
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for e, d in splits:
        cfg = replace(model_cfg, enc_layers=e, dec_layers=d, infill_layers=d)
        run_dir = None if out is None else out / f"split_{e}_{d}"
        res = run_training(train_cfg, cfg, train_set, run_dir)
        model = res.averaged.to_model()
        metrics = evaluate(model, test_set, k_list, ["align-refine"], timing=False)
        latency = timed_decode(model, test_set, timing_k, repeats)
        audit = layer_pass_audit(model, test_set, timing_k, early_exit=False)
        rows.append({
            "enc_layers": e, "dec_layers": d,
            "wer": {str(m["k"]): m["wer"] for m in metrics},
            "mean_exit_iteration": {str(m["k"]): m["mean_exit_iteration"] for m in metrics},
            "rtf": latency.rtf, "wall_seconds": latency.wall_seconds, "timing_k": timing_k,
            "layer_pass_audit": audit,
        })
        log.info("split %d-%d: wer %s rtf %.4f", e, d, rows[-1]["wer"], latency.rtf)
    key = str(max(k_list))
    deeper = [r["wer"][key] for r in rows if r["dec_layers"] > 1]
    for r in rows:
        r["shallow_decoder_worse"] = bool(r["dec_layers"] == 1 and deeper and r["wer"][key] > min(deeper))
    report = {
        "schema": ABLATION_SCHEMA,
        "config_hash": config_hash(train_cfg.to_dict(), model_cfg.to_dict(), {"splits": [list(s) for s in splits]}),
        "provenance": f"ablation total={total_layers} seed={train_cfg.seed}",
        "total_layers": total_layers,
        "k_list": [int(k) for k in k_list],
        "splits": rows,
    }
    if out is not None:
        write_report(report, out / "ablation_report.json")
    return report
