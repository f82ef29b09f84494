"""Checkpoints: a JSON manifest plus one little-endian float32 blob.

A checkpoint directory holds ``manifest.json`` and ``params.bin``.  The
manifest lists ``{name, shape, dtype, byte_offset, byte_len}`` for every
tensor in blob order, plus the run config and the step counter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autograd import Tensor
from .config import RunConfig

MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    step: int = 0
    extra: dict = field(default_factory=dict)

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)


def save_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray], config: RunConfig | dict, step: int = 0, extra=None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32le", "byte_offset": offset, "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    cfg = config.to_dict() if isinstance(config, RunConfig) else dict(config)
    manifest = {"format": 1, "step": step, "config": cfg, "tensors": entries, "extra": extra or {}}
    (root / BLOB).write_bytes(b"".join(chunks))
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return root


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
        blob = (root / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"{root}: missing {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{root}: corrupt manifest ({exc})") from exc
    params = {}
    expected = 0
    for e in manifest.get("tensors", []):
        n = int(np.prod(e["shape"], dtype=np.int64)) * 4
        if e["byte_offset"] != expected or e["byte_len"] != n:
            raise CheckpointError(f"{e['name']}: offsets not contiguous or length disagrees with shape")
        if e["byte_offset"] + n > len(blob):
            raise CheckpointError(f"{e['name']}: blob truncated ({len(blob)} bytes)")
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=e["byte_offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
        expected += n
    if expected != len(blob):
        raise CheckpointError(f"blob holds {len(blob)} bytes, manifest describes {expected}")
    return Checkpoint(params, manifest.get("config", {}), manifest.get("step", 0), manifest.get("extra", {}))


def restore(tensors: Mapping[str, Tensor], ckpt: Checkpoint, prefix_map: Mapping[str, str] | None = None, strict=True) -> None:
    """Copy checkpoint values into ``tensors`` in place.

    ``prefix_map`` rewrites checkpoint name prefixes (e.g. ``student.`` ->
    ``backbone.``) before matching.
    """
    renamed = {}
    for name, arr in ckpt.params.items():
        for old, new in (prefix_map or {}).items():
            if name.startswith(old):
                name = new + name[len(old) :]
                break
        renamed[name] = arr
    for name, t in tensors.items():
        if name not in renamed:
            if strict:
                raise CheckpointError(f"checkpoint lacks {name}")
            continue
        if renamed[name].shape != t.shape:
            raise CheckpointError(f"{name}: checkpoint {renamed[name].shape} vs model {t.shape}")
        t.data[...] = renamed[name]
