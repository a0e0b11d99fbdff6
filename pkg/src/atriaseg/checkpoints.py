"""Checkpoint persistence: a torch parameter blob plus a versioned JSON sidecar."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

from .architectures import ArchitectureSpec, ConfigError, build_model

SCHEMA_VERSION = 1
ADAM = {"name": "adam", "betas": [0.9, 0.999], "eps": 1e-8}


class CheckpointError(RuntimeError):
    pass


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_sidecar(path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".pt", ".json") else path
    return stem.with_suffix(".pt"), stem.with_suffix(".json")


def save_model_checkpoint(model, path, *, seed: int, epoch: int, split_id: str | None,
                          val_metrics: dict | None = None) -> Path:
    """Write ``<path>.pt`` and ``<path>.json``; returns the sidecar path."""
    blob, sidecar = _paths(path)
    blob.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), blob)
    write_sidecar(sidecar, {
        "schema_version": SCHEMA_VERSION,
        "type": "submodel",
        "kind": model.spec.kind,
        "spec": model.spec.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "split_id": split_id,
        "val_metrics": val_metrics or {},
        "optimizer": ADAM,
        "blob": blob.name,
        "blob_sha256": file_sha256(blob),
    })
    return sidecar


def read_sidecar(path) -> dict:
    _, sidecar = _paths(path)
    try:
        meta = json.loads(sidecar.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint sidecar {sidecar}: {exc}") from exc
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{sidecar}: unsupported schema_version {meta.get('schema_version')}")
    return meta


def load_model_checkpoint(path):
    """Return ``(model, sidecar)`` for a submodel checkpoint."""
    blob, sidecar = _paths(path)
    meta = read_sidecar(sidecar)
    if meta.get("type") != "submodel":
        raise CheckpointError(f"{sidecar} is not a submodel checkpoint")
    try:
        spec = ArchitectureSpec.from_dict(meta["spec"])
    except (ConfigError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{sidecar}: incompatible architecture spec: {exc}") from exc
    model = build_model(spec, meta["seed"])
    try:
        state = torch.load(blob, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except (OSError, RuntimeError) as exc:
        raise CheckpointError(f"{blob}: cannot load parameters: {exc}") from exc
    model.eval()
    return model, meta
