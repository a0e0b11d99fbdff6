"""Train two small sub-models, fuse them and print a results table.

A scaled-down version of the full pipeline: a UNet on splits A and B,
an ensemble over the two, then a per-class Dice/HD95 table on the test set.
Takes a few minutes on one CPU core.

    python3 demos/02_train_and_ensemble.py [epochs]
"""

import logging
import sys
import tempfile
from pathlib import Path

from atriaseg.architectures import ArchitectureSpec
from atriaseg.checkpoints import load_model_checkpoint
from atriaseg.datasets import SliceStore, make_splits
from atriaseg.ensemble import build_ensemble, load_ensemble_checkpoint
from atriaseg.evaluation import evaluate, export_predictions, render_report
from atriaseg.losses import ENSEMBLE_WEIGHTS
from atriaseg.phantom import generate_dataset
from atriaseg.training import TrainConfig, train_ensemble, train_submodel

logging.basicConfig(level=logging.INFO, format="%(message)s")
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8

root = Path(tempfile.mkdtemp(prefix="atriaseg_train_"))
generate_dataset(root / "data", count=8, depth=16, size=64, seed=1)
store = SliceStore.from_directory(root / "data")
manifest = make_splits(store.refs(), seed=1)

reports, checkpoints = [], []
for split in ("A", "B"):
    cfg = TrainConfig(epochs=epochs, batch_size=8, seed=0)
    best, record = train_submodel(ArchitectureSpec("unet"), manifest, split, cfg, store, root / f"unet_{split}")
    model, _ = load_model_checkpoint(best)
    reports.append(evaluate(model, manifest, store, split=split, model_id=f"unet_{split}"))
    checkpoints.append(best)

ensemble = build_ensemble(checkpoints)
cfg = TrainConfig(epochs=max(2, epochs // 3), batch_size=8, seed=0, loss_weights=ENSEMBLE_WEIGHTS)
best, _ = train_ensemble(ensemble, manifest, cfg, store, root / "ensemble")
ensemble, _ = load_ensemble_checkpoint(best)
reports.append(evaluate(ensemble, manifest, store, model_id="ensemble"))
print("fusion weights (rows: background, wall, RA, LA):")
print(ensemble.fusion.detach().numpy().round(3))

print(render_report(reports))
export_predictions(ensemble, manifest, store, root / "predictions")
print(f"predicted volumes and montages in {root / 'predictions'}")
