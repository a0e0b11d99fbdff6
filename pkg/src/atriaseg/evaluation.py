"""Per-class Dice/HD95 evaluation on a partition and results-table reports."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .architectures import SegmentationNet, _as_batch, argmax_classes
from .datasets import SliceStore, SplitManifest, normalize
from .metrics import dice_score, hd95
from .volume_io import LabelVolume, save_label_volume

CLASS_NAMES = {1: "wall", 2: "RA", 3: "LA"}
CLASS_TITLES = {"wall": "Wall", "RA": "RA", "LA": "LA"}
ARCH_ORDER = ("unet", "resnet", "efficientnet", "vgg")
ARCH_TITLES = {"unet": "UNet", "resnet": "ResNet", "efficientnet": "EfficientNet", "vgg": "VGG", "ensemble": "Ensemble"}
SPLIT_ORDER = ("A", "B", "C")
REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ("model_id", "split", "class", "dice_pct", "hd95", "n_slices", "n_undefined")


class ReportError(ValueError):
    pass


@dataclass
class MetricsReport:
    model_id: str
    architecture: str
    split: str | None
    classes: dict[str, dict]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["model_id"], d["architecture"], d.get("split"), d["classes"], d.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"schema_version": REPORT_SCHEMA_VERSION, **self.to_dict()}, indent=2))

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ReportError(f"{path}: unsupported report schema {d.get('schema_version')}")
        return cls.from_dict(d)


def mean_foreground_dice(report: MetricsReport) -> float:
    """Mean over classes present in the partition, as a fraction in [0, 1]."""
    vals = [c["dice"] for c in report.classes.values() if c["dice"] is not None]
    return math.fsum(vals) / len(vals) / 100.0 if vals else 0.0


def _logits(model, x: torch.Tensor) -> np.ndarray:
    if isinstance(model, SegmentationNet):
        model.check_input(x)
    return model(x).numpy()


@torch.no_grad()
def predict_slice(model, image: np.ndarray) -> np.ndarray:
    """Class map for one raw slice (normalised here, as in training)."""
    was_training = model.training
    model.eval()
    try:
        logits = _logits(model, _as_batch(normalize(image)[None]))
    finally:
        model.train(was_training)
    return argmax_classes(logits[0])


def _slice_metrics(pred: np.ndarray, gt: np.ndarray, spacing, compute_hd: bool):
    out = {}
    for c, name in CLASS_NAMES.items():
        p, g = pred == c, gt == c
        if not p.any() and not g.any():
            continue
        out[name] = (dice_score(p, g), hd95(p, g, spacing) if compute_hd else None)
    return out


def evaluate(model, manifest: SplitManifest, store: SliceStore, *, split: str = "A", partition: str = "test",
             compute_hd: bool = True, model_id: str | None = None, architecture: str | None = None,
             spacing=(1.0, 1.0), checkpoint_hash: str | None = None) -> MetricsReport:
    """Per-slice 2D Dice/HD95 averaged over the slices where a class is present in gt or prediction."""
    refs = manifest.partition(split, partition)
    if not refs:
        raise ReportError(f"partition {split}/{partition} is empty")
    dices = {n: [] for n in CLASS_NAMES.values()}
    hds = {n: [] for n in CLASS_NAMES.values()}
    undefined = {n: 0 for n in CLASS_NAMES.values()}
    for ref in refs:
        sample = store[ref]
        pred = predict_slice(model, sample.image)
        for name, (d, h) in _slice_metrics(pred, sample.label, spacing, compute_hd).items():
            dices[name].append(d)
            if compute_hd:
                if h is None:
                    undefined[name] += 1
                else:
                    hds[name].append(h)
    classes = {}
    for name in CLASS_NAMES.values():
        n = len(dices[name])
        classes[name] = {
            "dice": 100.0 * math.fsum(dices[name]) / n if n else None,
            "hd95": math.fsum(hds[name]) / len(hds[name]) if hds[name] else None,
            "n_slices": n,
            "n_undefined": undefined[name],
        }
    if architecture is None:
        architecture = "ensemble" if not isinstance(model, SegmentationNet) else model.spec.kind
    metadata = {
        "partition": partition,
        "manifest_hash": manifest.digest(),
        "checkpoint_hash": checkpoint_hash,
        "n_eval_slices": len(refs),
        "aggregation": "per-slice 2D metrics, mean over slices containing the class in gt or prediction",
        "hd95_units": "voxel" if tuple(spacing) == (1.0, 1.0) else "mm",
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    return MetricsReport(model_id or architecture, architecture, None if architecture == "ensemble" else split,
                         classes, metadata)


# -- rendering -------------------------------------------------------------------------


def _row_key(r: MetricsReport):
    if r.architecture == "ensemble":
        return (len(ARCH_ORDER), 0, r.model_id)
    arch = ARCH_ORDER.index(r.architecture) if r.architecture in ARCH_ORDER else len(ARCH_ORDER) - 0.5
    split = SPLIT_ORDER.index(r.split) if r.split in SPLIT_ORDER else len(SPLIT_ORDER)
    return (arch, split, r.model_id)


def _fmt(v):
    return "-" if v is None else f"{v:.2f}"


def reports_to_json(reports) -> str:
    return json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "reports": [r.to_dict() for r in reports]},
                      indent=2, sort_keys=True)


def reports_from_json(text: str) -> list[MetricsReport]:
    d = json.loads(text)
    if d.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ReportError(f"unsupported report schema {d.get('schema_version')}")
    return [MetricsReport.from_dict(r) for r in d["reports"]]


def best_flags(reports) -> dict[str, tuple[int | None, int | None]]:
    """Per class: index of the best (max) Dice and best (min) HD95 report."""
    flags = {}
    for name in reports[0].classes:
        dice = [(r.classes[name]["dice"], i) for i, r in enumerate(reports) if r.classes[name]["dice"] is not None]
        hd = [(r.classes[name]["hd95"], i) for i, r in enumerate(reports) if r.classes[name]["hd95"] is not None]
        flags[name] = (max(dice, key=lambda t: (t[0], -t[1]))[1] if dice else None,
                       min(hd)[1] if hd else None)
    return flags


def render_report(reports, format: str = "table") -> str:
    """Render reports as a table (one row per model, best values starred), JSON or CSV."""
    reports = list(reports)
    if not reports:
        raise ReportError("no reports to render")
    schema = set(reports[0].classes)
    for r in reports:
        if set(r.classes) != schema:
            raise ReportError(f"report {r.model_id!r} has classes {sorted(r.classes)}, expected {sorted(schema)}")
    reports = sorted(reports, key=_row_key)
    if format == "json":
        return reports_to_json(reports)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            for name, c in r.classes.items():
                w.writerow([r.model_id, r.split or "N/A", name,
                            "" if c["dice"] is None else repr(c["dice"]),
                            "" if c["hd95"] is None else repr(c["hd95"]),
                            c["n_slices"], c["n_undefined"]])
        return buf.getvalue()
    if format != "table":
        raise ReportError(f"unknown format {format!r}")

    names = [n for n in CLASS_NAMES.values() if n in schema] + sorted(schema - set(CLASS_NAMES.values()))
    flags = best_flags(reports)
    header = ["Architecture", "Split"]
    for n in names:
        header += [f"{CLASS_TITLES.get(n, n)} Dice", f"{CLASS_TITLES.get(n, n)} HD95"]
    rows = []
    for i, r in enumerate(reports):
        row = [ARCH_TITLES.get(r.architecture, r.architecture), r.split or "N/A"]
        for n in names:
            c = r.classes[n]
            best_d, best_h = flags[n]
            row.append(_fmt(c["dice"]) + ("*" if i == best_d else ""))
            row.append(_fmt(c["hd95"]) + ("*" if i == best_h else ""))
        rows.append(row)
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(header), sep] + [line(r) for r in rows]) + "\n"


# -- prediction export --------------------------------------------------------------------

PALETTE = np.array([[0, 0, 0], [255, 200, 0], [0, 120, 255], [255, 40, 40]], dtype=np.uint8)


def _montage(image: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    gray = (normalize(image) * 255).round().astype(np.uint8)
    gray = np.repeat(gray[..., None], 3, axis=2)
    gap = np.full((image.shape[0], 4, 3), 255, dtype=np.uint8)
    return np.concatenate([gray, gap, PALETTE[gt], gap, PALETTE[pred]], axis=1)


def export_predictions(model, manifest: SplitManifest, store: SliceStore, out_dir, *, split: str = "A",
                       partition: str = "test") -> list[Path]:
    """Write full predicted label volumes for every volume touched by the partition, plus PNG montages.

    Layout: ``<out>/<volume_id>/prediction.nii.gz`` and ``<out>/montage/<volume_id>_<slice>.png``.
    """
    from PIL import Image

    refs = manifest.partition(split, partition)
    if not refs:
        raise ReportError(f"partition {split}/{partition} is empty")
    out_dir = Path(out_dir)
    montage_dir = out_dir / "montage"
    try:
        montage_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {montage_dir}: {exc}") from exc
    by_volume: dict[str, list[int]] = {}
    for vid, k in refs:
        by_volume.setdefault(vid, []).append(k)
    written = []
    for vid in sorted(by_volume):
        indices = sorted(k for (v, k) in store.refs() if v == vid)
        preds = {k: predict_slice(model, store[(vid, k)].image) for k in indices}
        labels = np.stack([preds[k] for k in indices]).astype(np.uint8)
        src = store.volumes.get(vid)
        spacing = src[0].spacing if src else (1.0, 1.0, 1.0)
        header = src[0].header if src else None
        path = out_dir / vid / "prediction.nii.gz"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_label_volume(LabelVolume(labels, spacing, vid, header), path)
        written.append(path)
        for k in sorted(by_volume[vid]):
            s = store[(vid, k)]
            png = montage_dir / f"{vid}_{k:03d}.png"
            try:
                Image.fromarray(_montage(s.image, s.label.astype(np.int64), preds[k])).save(png)
            except OSError as exc:
                raise OSError(f"cannot write montage {png}: {exc}") from exc
    return written
