"""Command-line entry point: ``atriaseg <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .architectures import KINDS, ArchitectureSpec
from .datasets import SPLIT_IDS, SliceStore, SplitManifest, make_splits
from .ensemble import build_ensemble, load_any_checkpoint
from .checkpoints import CheckpointError, file_sha256, read_sidecar
from .evaluation import MetricsReport, ReportError, evaluate, export_predictions, render_report
from .losses import ENSEMBLE_WEIGHTS, SUBMODEL_WEIGHTS
from .phantom import generate_dataset
from .training import TrainConfig, train_ensemble, train_submodel
from .volume_io import read_index

log = logging.getLogger("atriaseg")


def _cmd_phantom(args):
    ids = generate_dataset(args.out, args.count, depth=args.depth, size=args.size, noise_std=args.noise,
                           seed=args.seed, wall_thickness_voxels=args.wall)
    print(f"wrote {len(ids)} phantoms to {args.out}")


def _cmd_split(args):
    refs = [(c["id"], k) for c in read_index(args.data) for k in range(c["dims"][0])]
    manifest = make_splits(refs, seed=args.seed, ratio=tuple(args.ratio))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    manifest.save(args.out)
    print(f"{len(refs)} slices: train {len(manifest.partition('A', 'train'))}, "
          f"val {len(manifest.partition('A', 'val'))}, test {len(manifest.test)} -> {args.out}")


def _cmd_train(args):
    manifest = SplitManifest.load(args.manifest)
    store = SliceStore.from_directory(args.data)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed, loss_weights=SUBMODEL_WEIGHTS,
                         checkpoint_every=args.checkpoint_every, augment=not args.no_augment,
                         clip_grad_norm=None if args.no_clip else 5.0)
    best, record = train_submodel(ArchitectureSpec(args.arch), manifest, args.split, config, store, args.out)
    print(f"best epoch {record.best_epoch} val mean Dice {record.best_val_dice:.4f} -> {best}")


def _find_submodels(root) -> list[Path]:
    found = sorted(p for p in Path(root).rglob("best.json") if read_sidecar(p).get("type") == "submodel")
    if not found:
        raise CheckpointError(f"no sub-model best.json checkpoints under {root}")
    return found


def _cmd_train_ensemble(args):
    manifest = SplitManifest.load(args.manifest)
    store = SliceStore.from_directory(args.data)
    ensemble = build_ensemble(_find_submodels(args.submodels))
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed, loss_weights=ENSEMBLE_WEIGHTS)
    best, record = train_ensemble(ensemble, manifest, config, store, args.out, split=args.split)
    print(f"ensemble of {ensemble.size}: best epoch {record.best_epoch} "
          f"val mean Dice {record.best_val_dice:.4f} -> {best}")


def _cmd_evaluate(args):
    manifest = SplitManifest.load(args.manifest)
    store = SliceStore.from_directory(args.data)
    model, meta = load_any_checkpoint(args.checkpoint)
    is_ensemble = meta.get("type") == "ensemble"
    split = args.split or (meta.get("split_id") if not is_ensemble else None) or "A"
    arch = "ensemble" if is_ensemble else meta["kind"]
    model_id = args.model_id or (arch if is_ensemble else f"{arch}_{split}")
    report = evaluate(model, manifest, store, split=split, partition=args.partition, model_id=model_id,
                      architecture=arch, checkpoint_hash=file_sha256(Path(args.checkpoint).with_suffix(".pt")))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.save(args.out)
    if args.export:
        export_predictions(model, manifest, store, args.export, split=split, partition=args.partition)
    print(render_report([report]), end="")


def _cmd_report(args):
    reports = [MetricsReport.load(p) for p in args.inputs]
    print(render_report(reports, args.format), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atriaseg", description="Bi-atrial LGE-MRI segmentation pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic phantom datasets")
    phsub = ph.add_subparsers(dest="phantom_command", required=True)
    g = phsub.add_parser("generate", help="write phantom volumes plus dataset.json")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--depth", type=int, default=16)
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--wall", type=int, default=2, help="wall thickness in voxels")
    g.set_defaults(func=_cmd_phantom)

    s = sub.add_parser("split", help="build the A/B/C split manifest")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--ratio", type=float, nargs=3, default=(84, 8, 8))
    s.set_defaults(func=_cmd_split)

    t = sub.add_parser("train", help="train one sub-model")
    t.add_argument("--arch", choices=KINDS, required=True)
    t.add_argument("--split", choices=SPLIT_IDS, required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--no-clip", action="store_true", help="disable gradient-norm clipping")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("train-ensemble", help="train fusion weights over frozen sub-models")
    e.add_argument("--submodels", required=True, help="directory searched for sub-model best.json files")
    e.add_argument("--manifest", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--epochs", type=int, default=30)
    e.add_argument("--batch", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--split", choices=SPLIT_IDS, default="A", help="split whose training partition is used")
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_train_ensemble)

    v = sub.add_parser("evaluate", help="evaluate a checkpoint and write a report")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--manifest", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--split", choices=SPLIT_IDS)
    v.add_argument("--partition", choices=("train", "val", "test"), default="test")
    v.add_argument("--model-id")
    v.add_argument("--export", help="directory for predicted volumes and PNG montages")
    v.set_defaults(func=_cmd_evaluate)

    r = sub.add_parser("report", help="render stored reports")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--format", choices=("table", "json", "csv"), default="table")
    r.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"atriaseg: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
