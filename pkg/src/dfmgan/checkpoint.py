"""Checkpoint directories: ``manifest.json`` + ``params.bin``.

``params.bin`` holds every array as row-major little-endian float32,
concatenated in manifest order; each manifest entry records its name,
shape, dtype ("f32") and byte offset.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .utils import DatasetError

FORMAT = "dfmgan-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict
    step: int = 0
    kind: str = "backbone"
    frozen: set = field(default_factory=set)
    metadata: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def state_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().astype("<f4") for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in arrays.items()}
    missing, unexpected = module.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise DatasetError(f"checkpoint/model mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write ``ckpt`` atomically: a partial checkpoint is never left behind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        entries, offset = [], 0
        with open(tmp / "params.bin", "wb") as fh:
            for name, arr in ckpt.arrays.items():
                # np.asarray keeps 0-d shapes (ascontiguousarray would promote them to 1-d)
                data = np.asarray(arr, dtype="<f4")
                fh.write(data.tobytes())
                entry = {"name": name, "shape": list(data.shape), "dtype": "f32", "byte_offset": offset}
                if name in ckpt.frozen:
                    entry["frozen"] = True
                entries.append(entry)
                offset += data.nbytes
        manifest = {
            "format": FORMAT,
            "version": VERSION,
            "kind": ckpt.kind,
            "step": int(ckpt.step),
            "config": ckpt.config,
            "metadata": ckpt.metadata,
            "arrays": entries,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "params.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"{path} is not a {FORMAT} directory")
    arrays, frozen = {}, set()
    for e in manifest["arrays"]:
        if e["dtype"] != "f32":
            raise DatasetError(f"unsupported dtype {e['dtype']!r} for {e['name']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["byte_offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
        if e.get("frozen"):
            frozen.add(e["name"])
    return Checkpoint(arrays=arrays, config=manifest["config"], step=manifest["step"],
                      kind=manifest["kind"], frozen=frozen, metadata=manifest.get("metadata", {}))
