"""Parameter snapshots: a JSON header line followed by a raw float64 blob.

The layout is byte-deterministic (no timestamps, sorted keys), so identical
training runs produce identical files.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig
from .numerics import Tensor

CHECKPOINT_SCHEMA = "alignrefine.checkpoint/1"
_MAGIC = b"ALIGNREFINE-CKPT\n"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    provenance: list[str] = field(default_factory=list)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    schema: str = CHECKPOINT_SCHEMA

    @classmethod
    def from_model(cls, model: Model, **kw) -> Checkpoint:
        return cls(model.cfg, {k: v.data.copy() for k, v in model.params.items()}, **kw)

    def to_model(self) -> Model:
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}
        return Model(self.config, params)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        index = []
        blobs = []
        offset = 0
        for group, arrays in (("param", self.params), ("optim", self.optimizer)):
            for name in sorted(arrays):
                arr = np.ascontiguousarray(arrays[name], dtype="<f8")
                index.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
                blobs.append(arr.tobytes())
                offset += arr.nbytes
        header = {
            "schema": self.schema,
            "config": self.config.to_dict(),
            "step": self.step,
            "rng_state": self.rng_state,
            "provenance": self.provenance,
            "train_config": self.train_config,
            "tensors": index,
        }
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for b in blobs:
                fh.write(b)
        return path

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        raw = Path(path).read_bytes()
        if not raw.startswith(_MAGIC):
            raise CheckpointError(f"{path}: not a checkpoint file")
        nl = raw.index(b"\n", len(_MAGIC))
        header = json.loads(raw[len(_MAGIC):nl])
        if header.get("schema") != CHECKPOINT_SCHEMA:
            raise CheckpointError(
                f"{path}: schema {header.get('schema')!r} unsupported (expected {CHECKPOINT_SCHEMA})"
            )
        blob = memoryview(raw)[nl + 1:]
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "optim": {}}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"])) if t["shape"] else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"])
            groups[t["group"]][t["name"]] = arr.astype(np.float64)
        return cls(
            config=ModelConfig.from_dict(header["config"]),
            params=groups["param"],
            step=header["step"],
            rng_state=header["rng_state"],
            provenance=list(header["provenance"]),
            optimizer=groups["optim"],
            train_config=header.get("train_config", {}),
        )
