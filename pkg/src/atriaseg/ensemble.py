"""Per-class 1x1-convolution fusion of frozen sub-model logits."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from .architectures import NUM_CLASSES, ShapeError, _as_batch, argmax_classes
from .checkpoints import (
    SCHEMA_VERSION,
    CheckpointError,
    file_sha256,
    load_model_checkpoint,
    read_sidecar,
    write_sidecar,
)


class FusionError(ValueError):
    pass


def fuse(logit_maps, weights) -> np.ndarray | torch.Tensor:
    """``out[c] = sum_m weights[c, m] * logit_maps[m][c]``.

    Works on numpy arrays or tensors shaped ``(4, H, W)`` or ``(B, 4, H, W)``.
    """
    if len(logit_maps) == 0:
        raise FusionError("need at least one logit map")
    shapes = {tuple(m.shape) for m in logit_maps}
    if len(shapes) != 1:
        raise FusionError(f"logit maps have differing shapes {sorted(shapes)}")
    if torch.is_tensor(logit_maps[0]):
        stacked = torch.stack(list(logit_maps))
        w = weights if torch.is_tensor(weights) else torch.as_tensor(weights, dtype=stacked.dtype)
        lib = torch
    else:
        stacked = np.stack([np.asarray(m) for m in logit_maps])
        w = np.asarray(weights, dtype=stacked.dtype)
        lib = np
    m = stacked.shape[0]
    if tuple(w.shape) != (NUM_CLASSES, m):
        raise FusionError(f"weights must have shape ({NUM_CLASSES}, {m}), got {tuple(w.shape)}")
    if stacked.shape[-3] != NUM_CLASSES:
        raise FusionError(f"logit maps must have {NUM_CLASSES} channels")
    if stacked.ndim == 4:
        return lib.einsum("cm,mchw->chw", w, stacked)
    return lib.einsum("cm,mbchw->bchw", w, stacked)


class EnsembleModel(nn.Module):
    """Frozen sub-models wrapped by one bias-free weight vector per class."""

    def __init__(self, submodels, sources=None):
        super().__init__()
        if len(submodels) < 1:
            raise FusionError("an ensemble needs at least one sub-model")
        self.submodels = nn.ModuleList(submodels)
        for p in self.submodels.parameters():
            p.requires_grad_(False)
        m = len(submodels)
        self.fusion = nn.Parameter(torch.full((NUM_CLASSES, m), 1.0 / m))
        self.sources = list(sources) if sources is not None else [None] * m
        self.submodels.eval()

    @property
    def size(self) -> int:
        return len(self.submodels)

    def train(self, mode: bool = True):
        super().train(mode)
        # batch-norm statistics and dropout of the members stay fixed
        self.submodels.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            logits = [m(x) for m in self.submodels]
        return fuse(logits, self.fusion)


def build_ensemble(submodel_checkpoints) -> EnsembleModel:
    models, sources = [], []
    for path in submodel_checkpoints:
        try:
            model, _ = load_model_checkpoint(path)
        except CheckpointError as exc:
            raise CheckpointError(f"sub-model {path}: {exc}") from exc
        head = [mod for mod in model.modules() if isinstance(mod, nn.Conv2d)][-1]
        if head.out_channels != NUM_CLASSES:
            raise CheckpointError(f"sub-model {path} emits {head.out_channels} classes, expected {NUM_CLASSES}")
        models.append(model)
        sources.append(str(path))
    return EnsembleModel(models, sources)


@torch.no_grad()
def forward_ensemble(ensemble: EnsembleModel, image) -> np.ndarray:
    ensemble.eval()
    x = _as_batch(image)
    for m in ensemble.submodels:
        m.check_input(x)
    return ensemble(x)[0].numpy()


def predict_ensemble(ensemble: EnsembleModel, image) -> np.ndarray:
    return argmax_classes(forward_ensemble(ensemble, image))


def save_ensemble_checkpoint(ensemble: EnsembleModel, path, *, epoch: int, val_metrics=None) -> Path:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".pt", ".json") else path
    blob, sidecar = stem.with_suffix(".pt"), stem.with_suffix(".json")
    blob.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"fusion": ensemble.fusion.detach().clone()}, blob)
    hashes = []
    for src in ensemble.sources:
        if src is None:
            hashes.append(None)
        else:
            hashes.append(file_sha256(Path(src).with_suffix(".pt")))
    write_sidecar(sidecar, {
        "schema_version": SCHEMA_VERSION,
        "type": "ensemble",
        "M": ensemble.size,
        "class_count": NUM_CLASSES,
        "submodels": [str(Path(s).with_suffix(".json")) if s else None for s in ensemble.sources],
        "submodel_hashes": hashes,
        "epoch": int(epoch),
        "val_metrics": val_metrics or {},
        "blob": blob.name,
    })
    return sidecar


def load_ensemble_checkpoint(path, verify_hashes: bool = True):
    meta = read_sidecar(path)
    if meta.get("type") != "ensemble":
        raise CheckpointError(f"{path} is not an ensemble checkpoint")
    sources = meta["submodels"]
    if any(s is None for s in sources):
        raise CheckpointError(f"{path}: ensemble references in-memory sub-models")
    if verify_hashes:
        for src, digest in zip(sources, meta["submodel_hashes"]):
            actual = file_sha256(Path(src).with_suffix(".pt"))
            if actual != digest:
                raise CheckpointError(f"sub-model {src} changed since the ensemble was saved")
    ensemble = build_ensemble(sources)
    blob = Path(path).with_suffix(".pt")
    state = torch.load(blob, map_location="cpu", weights_only=True)
    if tuple(state["fusion"].shape) != (NUM_CLASSES, ensemble.size):
        raise CheckpointError(f"{blob}: fusion weights shape {tuple(state['fusion'].shape)} mismatch")
    with torch.no_grad():
        ensemble.fusion.copy_(state["fusion"])
    ensemble.eval()
    return ensemble, meta


def load_any_checkpoint(path):
    """Load a sub-model or ensemble checkpoint by inspecting its sidecar."""
    meta = read_sidecar(path)
    if meta.get("type") == "ensemble":
        return load_ensemble_checkpoint(path)
    return load_model_checkpoint(path)
