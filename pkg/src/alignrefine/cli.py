"""Command-line entry point.

Every verb takes a JSON config file plus ``--seed`` and ``--out`` overrides.
Output goes under ``--out``; relative paths (and the default) are placed
under the directory named by ``ALIGNREFINE_OUT_ROOT`` (default ``runs``).
On failure a one-line JSON error record is written to stderr and the
process exits with the category's code.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import Checkpoint, CheckpointError
from .data import SyntheticSpec, generate_dataset, load_dataset, save_dataset
from .experiments import UnknownFamilyError, run_depth_ablation, run_eval
from .metrics import average_checkpoints
from .model import ModelConfig
from .numerics import NonFiniteError, ShapeError
from .train import TrainConfig, TrainingDiverged, run_training

OUT_ROOT_ENV = "ALIGNREFINE_OUT_ROOT"
HYPS_SCHEMA = "alignrefine.hyps/1"

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "io": 4,
    "schema": 5,
    "diverged": 6,
    "internal": 70,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# config helpers ---------------------------------------------------------------

def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError("io", f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError("config", f"{path}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise CliError("config", f"{path}: top level must be an object")
    cfg["_base"] = str(path.resolve().parent)
    return cfg


def _path(cfg: dict, key: str) -> Path:
    if key not in cfg:
        raise CliError("config", f"missing required key {key!r}")
    p = Path(cfg[key])
    return p if p.is_absolute() else Path(cfg["_base"]) / p


def output_dir(verb: str, out: str | None) -> Path:
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    if out is None:
        d = root / verb
    else:
        d = Path(out) if Path(out).is_absolute() else root / out
    d.mkdir(parents=True, exist_ok=True)
    return d


def _model_config(cfg: dict, vocab) -> ModelConfig:
    return ModelConfig(vocab=vocab, **cfg.get("model", {}))


def _train_config(cfg: dict, seed: int | None) -> TrainConfig:
    tc = dict(cfg.get("train", {}))
    if seed is not None:
        tc["seed"] = seed
    return TrainConfig(**tc)


# verbs ------------------------------------------------------------------------

def cmd_gen_data(cfg: dict, seed: int | None, out: Path) -> dict:
    """``spec``: SyntheticSpec fields; ``splits``: name -> [start, stop) record ranges."""
    spec_d = dict(cfg.get("spec", {}))
    if seed is not None:
        spec_d["seed"] = seed
    splits = cfg.get("splits", {"data": [0, spec_d.get("count", SyntheticSpec.count)]})
    stop = max(int(b) for _, b in splits.values())
    spec_d["count"] = max(int(spec_d.get("count", stop)), stop)
    spec = SyntheticSpec.from_dict(spec_d)
    ds = generate_dataset(spec)
    written = {}
    for name, (a, b) in sorted(splits.items()):
        part = ds.subset(range(int(a), int(b)))
        part.meta = {"split": name, "range": [int(a), int(b)]}
        path = out / f"{name}.jsonl"
        save_dataset(part, path)
        written[name] = str(path)
    return {"datasets": written}


def cmd_train(cfg: dict, seed: int | None, out: Path) -> dict:
    """``data``; ``model``; ``train``; optional ``init`` checkpoint (e.g. to train the infill decoder)."""
    ds = load_dataset(_path(cfg, "data"))
    tc = _train_config(cfg, seed)
    kw = {}
    if "init" in cfg:
        init = Checkpoint.load(_path(cfg, "init"))
        mc = init.config
        kw["model"] = init.to_model()
    else:
        mc = _model_config(cfg, ds.vocab)
    res = run_training(tc, mc, ds, out, **kw)
    last = res.reports[-1] if res.reports else {}
    return {"averaged": str(out / "averaged.ckpt"), "checkpoints": [str(p) for p in res.checkpoints],
            "final_loss": last.get("total")}


def cmd_decode(cfg: dict, seed: int | None, out: Path) -> dict:
    """``checkpoint``; ``data``; ``k`` (default 5); ``family`` (default align-refine)."""
    from .experiments import decode_corpus

    ck = Checkpoint.load(_path(cfg, "checkpoint"))
    ds = load_dataset(_path(cfg, "data"))
    model = ck.to_model()
    k = int(cfg.get("k", 5))
    family = cfg.get("family", "align-refine")
    results, _ = decode_corpus(model, ds, k, family, cfg.get("threshold", 0.9), timing=False)
    lines = [json.dumps({"schema": HYPS_SCHEMA, "family": family, "k": k, "count": len(results)}, sort_keys=True)]
    for rec, r in zip(ds.records, results):
        lines.append(json.dumps({"id": rec.uid, "hyp": ds.vocab.decode(r["hyp"]),
                                 "exit_iteration": r["exit"]}, sort_keys=True))
    path = out / "hypotheses.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"hypotheses": str(path)}


def cmd_eval(cfg: dict, seed: int | None, out: Path) -> dict:
    """``checkpoint``; ``data``; ``k_list``; ``families``; ``threshold``; ``timing``."""
    ds = load_dataset(_path(cfg, "data"))
    families = cfg.get("families", cfg.get("family", "align-refine"))
    path = out / "eval_report.json"
    report = run_eval(_path(cfg, "checkpoint"), ds, cfg.get("k_list", [0, 1, 3, 5, 10]), families, path,
                      cfg.get("threshold", 0.9), bool(cfg.get("timing", True)))
    return {"report": str(path), "rows": len(report["metrics"])}


def cmd_ablate_depth(cfg: dict, seed: int | None, out: Path) -> dict:
    """``total_layers``; ``splits``; ``train_data``; ``test_data``; ``model``; ``train``; ``k_list``."""
    train_set = load_dataset(_path(cfg, "train_data"))
    test_set = load_dataset(_path(cfg, "test_data"))
    splits = [tuple(s) for s in cfg.get("splits", [])]
    report = run_depth_ablation(
        int(cfg.get("total_layers", 6)), splits, _train_config(cfg, seed), _model_config(cfg, train_set.vocab),
        train_set, test_set, cfg.get("k_list", [0, 1, 3]), int(cfg.get("timing_k", 3)),
        int(cfg.get("repeats", 3)), out,
    )
    return {"report": str(out / "ablation_report.json"), "splits": len(report["splits"])}


def cmd_average(cfg: dict, seed: int | None, out: Path) -> dict:
    """``checkpoints``: list of paths, averaged into ``averaged.ckpt``."""
    paths = cfg.get("checkpoints")
    if not paths:
        raise CliError("config", "missing or empty 'checkpoints' list")
    base = Path(cfg["_base"])
    resolved = [Path(p) if Path(p).is_absolute() else base / p for p in paths]
    ck = average_checkpoints(resolved)
    path = ck.save(out / "averaged.ckpt")
    return {"averaged": str(path), "sources": len(resolved)}


VERBS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "ablate-depth": cmd_ablate_depth,
    "average-checkpoints": cmd_average,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="alignrefine", description="Iterative CTC alignment refinement toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb, fn in VERBS.items():
        sp = sub.add_parser(verb, help=(fn.__doc__ or "").split("\n")[0])
        sp.add_argument("config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="override the config's seed")
        sp.add_argument("--out", default=None, help=f"output directory (relative paths go under ${OUT_ROOT_ENV})")
    return p


def _fail(category: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
    return EXIT_CODES[category]


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config)
        out = output_dir(args.verb, args.out)
        summary = VERBS[args.verb](cfg, args.seed, out)
    except CliError as e:
        return _fail(e.category, str(e))
    except TrainingDiverged as e:
        return _fail("diverged", str(e))
    except (CheckpointError,) as e:
        return _fail("schema", str(e))
    except FileNotFoundError as e:
        return _fail("io", str(e))
    except (UnknownFamilyError, TypeError, ShapeError, NonFiniteError, KeyError, ValueError) as e:
        msg = str(e)
        return _fail("schema" if "schema" in msg else "config", msg)
    except Exception as e:  # noqa: BLE001 - last-resort categorization
        return _fail("internal", f"{type(e).__name__}: {e}")
    sys.stdout.write(json.dumps({"ok": True, "verb": args.verb, **summary}, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
