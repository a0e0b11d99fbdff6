"""Adam + OneCycle training for sub-models and for ensemble fusion weights."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .architectures import ArchitectureSpec, build_model
from .checkpoints import ADAM, save_model_checkpoint
from .datasets import SliceStore, SplitManifest, batch_iterator
from .ensemble import EnsembleModel, save_ensemble_checkpoint
from .evaluation import mean_foreground_dice, evaluate
from .losses import ENSEMBLE_WEIGHTS, SUBMODEL_WEIGHTS, LossWeights, joint_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr_init: float = 1e-4
    lr_max: float = 1e-2
    lr_final: float = 1e-6
    warmup_fraction: float = 0.3
    batch_size: int = 8
    seed: int = 0
    loss_weights: LossWeights = SUBMODEL_WEIGHTS
    checkpoint_every: int = 0
    clip_grad_norm: float | None = 5.0
    augment: bool = True
    deterministic: bool = True

    def __post_init__(self):
        if not 0 < self.lr_init <= self.lr_max:
            raise TrainingError("need 0 < lr_init <= lr_max")
        if not 0 < self.lr_final <= self.lr_init:
            raise TrainingError("need 0 < lr_final <= lr_init")
        if not 0 < self.warmup_fraction < 1:
            raise TrainingError("warmup_fraction must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = self.loss_weights.to_dict()
        return d


SUBMODEL_CONFIG = TrainConfig(epochs=300, loss_weights=SUBMODEL_WEIGHTS)
ENSEMBLE_CONFIG = TrainConfig(epochs=30, loss_weights=ENSEMBLE_WEIGHTS)


def warmup_end_step(total_steps: int, config: TrainConfig) -> int:
    if total_steps < 2:
        return 0
    return min(total_steps - 1, max(1, round(config.warmup_fraction * (total_steps - 1))))


def onecycle_lr(step: int, total_steps: int, config: TrainConfig) -> float:
    """Cosine ramp lr_init -> lr_max, then cosine anneal lr_max -> lr_final.

    The peak sits at :func:`warmup_end_step`; step 0 and step ``total_steps - 1``
    hit ``lr_init`` and ``lr_final`` exactly.
    """
    if not 0 <= step < total_steps:
        raise IndexError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return config.lr_init
    peak = warmup_end_step(total_steps, config)
    if step <= peak:
        t = step / peak
        return config.lr_max + (config.lr_init - config.lr_max) * (1 + math.cos(math.pi * t)) / 2
    last = total_steps - 1
    if peak == last:
        return config.lr_max
    t = (step - peak) / (last - peak)
    return config.lr_final + (config.lr_max - config.lr_final) * (1 + math.cos(math.pi * t)) / 2


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: dict
    lr: float
    wall_time: float


@dataclass
class TrainRecord:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_dice: float = -1.0
    wall_time: float = 0.0

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for e in self.epochs:
                f.write(json.dumps(asdict(e)) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrainRecord":
        rec = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rec.epochs.append(EpochRecord(**json.loads(line)))
        return rec


def _set_determinism(config: TrainConfig):
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)


def _step_count(manifest, split, config, store):
    return sum(1 for _ in _iter_index(manifest, split, config, store))


def _iter_index(manifest, split, config, store):
    # ref-only pass so the step count matches the real iterator without loading images
    refs = manifest.partition(split, "train")
    shapes: dict = {}
    for r in refs:
        shapes.setdefault(store[r].image.shape, 0)
        shapes[store[r].image.shape] += 1
    for n in shapes.values():
        yield from range(math.ceil(n / config.batch_size))


@torch.no_grad()
def _val_loss(model, manifest, split, config, store, spacing) -> float:
    model.eval()
    total, n = 0.0, 0
    for images, labels in batch_iterator(manifest, split, "val", config.batch_size, False, config.seed, store):
        logits = model(torch.from_numpy(images))
        loss = joint_loss(logits, torch.from_numpy(labels), config.loss_weights, spacing)
        total += float(loss) * len(images)
        n += len(images)
    return total / n


def _run(model, params, manifest, split, config, store, out_dir, save_fn, spacing=(1.0, 1.0), tag="model"):
    """Shared epoch loop; ``save_fn(path, epoch, val_metrics)`` persists a checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = torch.optim.Adam(params, lr=config.lr_init, betas=tuple(ADAM["betas"]), eps=ADAM["eps"])
    steps_per_epoch = _step_count(manifest, split, config, store)
    total_steps = steps_per_epoch * config.epochs
    record = TrainRecord()
    start = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        model.train()
        losses = []
        lr = config.lr_init
        for b, (images, labels) in enumerate(batch_iterator(
                manifest, split, "train", config.batch_size, config.augment, config.seed, store, epoch=epoch)):
            lr = onecycle_lr(step, total_steps, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            logits = model(torch.from_numpy(images))
            loss = joint_loss(logits, torch.from_numpy(labels), config.loss_weights, spacing)
            if not torch.isfinite(loss):
                raise TrainingError(f"{tag}: non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            if config.clip_grad_norm:
                torch.nn.utils.clip_grad_norm_(params, config.clip_grad_norm)
            optimizer.step()
            losses.append(loss.item())
            step += 1
        val_loss = _val_loss(model, manifest, split, config, store, spacing)
        report = evaluate(model, manifest, store, split=split, partition="val", compute_hd=False)
        val_dice = {k: v["dice"] for k, v in report.classes.items()}
        mean_dice = mean_foreground_dice(report)
        record.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, val_dice, lr,
                                         time.perf_counter() - start))
        metrics = {"val_dice": val_dice, "val_mean_dice": mean_dice, "val_loss": val_loss}
        if mean_dice > record.best_val_dice:
            record.best_val_dice = mean_dice
            record.best_epoch = epoch
            save_fn(out_dir / "best", epoch, metrics)
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_fn(out_dir / f"epoch_{epoch:04d}", epoch, metrics)
        log.info("%s epoch %d loss %.4f val_loss %.4f val_dice %.4f lr %.2e",
                 tag, epoch, record.epochs[-1].train_loss, val_loss, mean_dice, lr)
    save_fn(out_dir / "final", config.epochs - 1, metrics)
    record.wall_time = time.perf_counter() - start
    record.write_jsonl(out_dir / "train_record.jsonl")
    return record


def train_submodel(spec: ArchitectureSpec, manifest: SplitManifest, split: str, config: TrainConfig,
                   store: SliceStore, out_dir):
    """Train one architecture on one split; returns ``(best checkpoint sidecar path, TrainRecord)``."""
    _set_determinism(config)
    model = build_model(spec, config.seed)
    params = [p for p in model.parameters() if p.requires_grad]

    def save(path, epoch, metrics):
        save_model_checkpoint(model, path, seed=config.seed, epoch=epoch, split_id=split, val_metrics=metrics)

    record = _run(model, params, manifest, split, config, store, out_dir, save, tag=f"{spec.kind}/{split}")
    return Path(out_dir) / "best.json", record


def train_ensemble(ensemble: EnsembleModel, manifest: SplitManifest, config: TrainConfig, store: SliceStore,
                   out_dir, split: str = "A"):
    """Optimise only the fusion weights on ``split``'s training partition."""
    _set_determinism(config)
    if any(p.requires_grad for p in ensemble.submodels.parameters()):
        raise TrainingError("ensemble sub-models must be frozen")
    params = [ensemble.fusion]

    def save(path, epoch, metrics):
        save_ensemble_checkpoint(ensemble, path, epoch=epoch, val_metrics=metrics)

    record = _run(ensemble, params, manifest, split, config, store, out_dir, save, tag="ensemble")
    return Path(out_dir) / "best.json", record
