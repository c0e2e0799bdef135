"""Checkpoints: a JSON manifest plus one little-endian float32 blob.

The manifest lists ``{name, shape, offset}`` for every stored tensor;
parameters are stored under ``param/<name>`` and optimiser moments under
``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .model import CclmConfig, CclmModel
from .train import OptimState

FORMAT = "cclm-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path: str | Path, model: CclmModel, state: OptimState | None = None,
                    meta: dict | None = None) -> Path:
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    tensors: list[tuple[str, np.ndarray]] = [(f"param/{k}", v.data) for k, v in model.params.items()]
    optim = None
    if state is not None:
        for k in model.params:
            if k in state.m:
                tensors.append((f"adam_m/{k}", state.m[k]))
                tensors.append((f"adam_v/{k}", state.v[k]))
        optim = {f: getattr(state, f) for f in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}
    entries, chunks, offset = [], [], 0
    for name, arr in tensors:
        b = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(b)
        offset += len(b)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "blob": blob_path.name,
        "total_bytes": offset,
        "tensors": entries,
        "optimizer": optim,
        "meta": meta or {},
    }
    _atomic_write(blob_path, blob)
    _atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True).encode())
    return manifest_path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_path, _ = _paths(path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"{manifest_path}: blob holds {len(blob)} bytes, manifest expects {manifest['total_bytes']}")
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float32)
    return manifest, arrays


def load_checkpoint(path: str | Path, config: CclmConfig | None = None
                    ) -> tuple[CclmModel, OptimState | None, dict]:
    """Rebuild model (and optimiser state when stored) from a checkpoint.

    With ``config`` given, parameters are checked against a model built from
    it and the first mismatch is reported.
    """
    manifest, arrays = read_checkpoint(path)
    stored = CclmConfig.from_dict(manifest["config"])
    model = CclmModel(config or stored, seed=0)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    for name, t in model.params.items():
        if name not in params:
            raise CheckpointError(f"checkpoint lacks parameter {name!r} required by the config")
        if params[name].shape != t.shape:
            raise CheckpointError(
                f"shape mismatch for parameter {name!r}: checkpoint {params[name].shape} vs config {t.shape}")
    extra = set(params) - set(model.params)
    if extra:
        raise CheckpointError(f"checkpoint holds parameters unknown to the config, e.g. {sorted(extra)[0]!r}")
    model.load_state_dict(params)
    state = None
    if manifest.get("optimizer"):
        state = OptimState(**manifest["optimizer"])
        for k in model.params:
            if f"adam_m/{k}" in arrays:
                state.m[k] = arrays[f"adam_m/{k}"].copy()
                state.v[k] = arrays[f"adam_v/{k}"].copy()
    return model, state, manifest.get("meta", {})


def checkpoint_digest(path: str | Path) -> str:
    manifest_path, blob_path = _paths(path)
    h = hashlib.sha256()
    h.update(manifest_path.read_bytes())
    h.update(blob_path.read_bytes())
    return h.hexdigest()
