"""Slice-level splits, augmentation, normalisation and batching."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .volume_io import SliceSample, extract_slices, load_dataset

SPLIT_IDS = ("A", "B", "C")
PARTITIONS = ("train", "val", "test")
DEFAULT_RATIO = (84.0, 8.0, 8.0)

SliceRef = tuple[str, int]


class ConfigError(ValueError):
    pass


class IterationError(RuntimeError):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary hashable parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(repr(tuple(parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# -- splits -----------------------------------------------------------------------


@dataclass
class SplitManifest:
    seed: int
    ratio: tuple[float, float, float]
    splits: dict[str, dict[str, list[SliceRef]]]
    test: list[SliceRef]

    def partition(self, split: str, partition: str) -> list[SliceRef]:
        if split not in self.splits:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLIT_IDS}")
        if partition == "test":
            return list(self.test)
        if partition not in ("train", "val"):
            raise ConfigError(f"unknown partition {partition!r}; expected one of {PARTITIONS}")
        return list(self.splits[split][partition])

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratio": list(self.ratio),
            "splits": {
                s: {p: [list(r) for r in refs] for p, refs in parts.items()}
                for s, parts in self.splits.items()
            },
            "test": [list(r) for r in self.test],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        def refs(xs):
            return [(str(v), int(k)) for v, k in xs]

        return cls(
            seed=int(d["seed"]),
            ratio=tuple(float(r) for r in d["ratio"]),
            splits={s: {p: refs(xs) for p, xs in parts.items()} for s, parts in d["splits"].items()},
            test=refs(d["test"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def split_sizes(n: int, ratio) -> tuple[int, int, int]:
    """floor(train), floor(val), remainder to test."""
    total = float(sum(ratio))
    n_train = math.floor(n * ratio[0] / total)
    n_val = math.floor(n * ratio[1] / total)
    return n_train, n_val, n - n_train - n_val


def make_splits(samples, seed: int = 0, ratio=DEFAULT_RATIO) -> SplitManifest:
    """Assign every slice to train/val/test for splits A, B and C.

    ``samples`` may be :class:`SliceSample` objects or ``(volume_id, slice_index)``
    pairs.  The test partition is drawn once and shared; train/val are
    reshuffled per split from split-specific derived seeds.
    """
    ratio = tuple(float(r) for r in ratio)
    if len(ratio) != 3 or min(ratio) < 0 or sum(ratio) <= 0:
        raise ConfigError(f"ratio must be three non-negative numbers with a positive sum, got {ratio}")
    refs = [s.ref if isinstance(s, SliceSample) else (str(s[0]), int(s[1])) for s in samples]
    if not refs:
        raise ConfigError("cannot split an empty sample list")
    if len(set(refs)) != len(refs):
        raise ConfigError("duplicate slice references")
    refs.sort()
    n_train, n_val, n_test = split_sizes(len(refs), ratio)

    order = np.random.default_rng(derive_seed(seed, "test")).permutation(len(refs))
    test = sorted(refs[i] for i in order[:n_test])
    pool = [refs[i] for i in sorted(order[n_test:])]

    splits = {}
    for sid in SPLIT_IDS:
        perm = np.random.default_rng(derive_seed(seed, sid)).permutation(len(pool))
        splits[sid] = {
            "train": sorted(pool[i] for i in perm[:n_train]),
            "val": sorted(pool[i] for i in perm[n_train:]),
        }
    return SplitManifest(seed, ratio, splits, test)


# -- augmentation -----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    p_hflip: float = 0.1
    p_vflip: float = 0.1
    p_rotate: float = 0.1
    rotation_angles: tuple[float, ...] = (45.0, 135.0, 225.0, 315.0)

    def __post_init__(self):
        ps = (self.p_hflip, self.p_vflip, self.p_rotate)
        if min(ps) < 0 or sum(ps) > 1:
            raise ConfigError(f"augmentation probabilities must be >= 0 and sum to <= 1, got {ps}")
        if not self.rotation_angles:
            raise ConfigError("rotation_angles must not be empty")


def choose_augmentation(u: float, policy: AugmentationPolicy) -> str:
    """Map a uniform draw to exactly one of 'hflip', 'vflip', 'rotate', 'identity'."""
    # cumulative thresholds rounded so 0.1 + 0.1 + 0.1 lands on 0.3
    edges = np.round(np.cumsum([policy.p_hflip, policy.p_vflip, policy.p_rotate]), 12)
    for kind, edge in zip(("hflip", "vflip", "rotate"), edges):
        if u < edge:
            return kind
    return "identity"


def apply_transform(array: np.ndarray, kind: str, angle: float = 0.0, order: int = 1) -> np.ndarray:
    """One geometric transform on a 2D array; rotations keep the canvas and zero-fill."""
    if kind == "identity":
        return array.copy()
    if kind == "hflip":
        return array[:, ::-1].copy()
    if kind == "vflip":
        return array[::-1, :].copy()
    if kind == "rotate":
        out = ndimage.rotate(array, angle, reshape=False, order=order, mode="constant", cval=0.0, prefilter=False)
        return out.astype(array.dtype)
    raise ConfigError(f"unknown transform {kind!r}")


def augment(sample: SliceSample, rng: np.random.Generator, policy: AugmentationPolicy = AugmentationPolicy(),
            return_kind: bool = False):
    """Apply at most one augmentation, chosen by a single uniform draw.

    Image is resampled bilinearly, label by nearest neighbour; both receive
    the same transform.
    """
    kind = choose_augmentation(rng.random(), policy)
    angle = 0.0
    if kind == "rotate":
        angle = float(policy.rotation_angles[rng.integers(len(policy.rotation_angles))])
    out = SliceSample(
        apply_transform(sample.image, kind, angle, order=1),
        apply_transform(sample.label, kind, angle, order=0),
        sample.volume_id,
        sample.slice_index,
    )
    return (out, kind, angle) if return_kind else out


def normalize(image: np.ndarray) -> np.ndarray:
    """Per-slice min-max scaling to [0, 1]; constant slices map to zeros."""
    image = np.asarray(image, dtype=np.float32)
    if not np.isfinite(image).all():
        raise ValueError("cannot normalise a slice with non-finite values")
    lo, hi = float(image.min()), float(image.max())
    if hi == lo:
        return np.zeros_like(image)
    return ((image - lo) / (hi - lo)).astype(np.float32)


# -- slice store and batching ------------------------------------------------------


class SliceStore:
    """In-memory lookup of slices by ``(volume_id, slice_index)``."""

    def __init__(self, samples):
        self._samples = {s.ref: s for s in samples}
        self.spacing = {}
        self.volumes = {}

    @classmethod
    def from_pairs(cls, pairs) -> "SliceStore":
        samples = []
        spacing = {}
        for vol, lab in pairs:
            samples.extend(extract_slices(vol, lab))
            spacing[vol.id] = vol.spacing
        store = cls(samples)
        store.spacing = spacing
        store.volumes = {vol.id: (vol, lab) for vol, lab in pairs}
        return store

    @classmethod
    def from_directory(cls, root) -> "SliceStore":
        return cls.from_pairs(load_dataset(root))

    def __getitem__(self, ref: SliceRef) -> SliceSample:
        try:
            return self._samples[tuple(ref)]
        except KeyError:
            raise KeyError(f"slice {ref} not in store") from None

    def __len__(self):
        return len(self._samples)

    def refs(self) -> list[SliceRef]:
        return sorted(self._samples)

    def samples(self, refs=None) -> list[SliceSample]:
        return [self[r] for r in (self.refs() if refs is None else refs)]


def _batches_by_size(refs, store, batch_size):
    groups: dict[tuple, list] = {}
    for r in refs:
        groups.setdefault(store[r].image.shape, []).append(r)
    out = []
    for shape in sorted(groups):
        g = groups[shape]
        out.extend(g[i : i + batch_size] for i in range(0, len(g), batch_size))
    return out


def batch_iterator(manifest: SplitManifest, split: str, partition: str, batch_size: int,
                   augment_flag: bool, seed: int, store: SliceStore, epoch: int = 0,
                   policy: AugmentationPolicy = AugmentationPolicy()) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images (B,1,H,W) float32, labels (B,H,W) int64)`` batches.

    Batches never mix slice sizes.  The training partition is shuffled with
    a seed derived from ``(seed, epoch)``; augmentation is applied only to the
    training partition.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    refs = manifest.partition(split, partition)
    if not refs:
        raise IterationError(f"partition {split}/{partition} is empty")
    train = partition == "train"
    epoch_seed = derive_seed(seed, split, epoch)
    rng = np.random.default_rng(epoch_seed)
    if train:
        refs = [refs[i] for i in rng.permutation(len(refs))]
    batches = _batches_by_size(refs, store, batch_size)
    if train:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    aug_rng = np.random.default_rng(derive_seed(epoch_seed, "augment"))
    do_aug = augment_flag and train
    for batch in batches:
        images, labels = [], []
        for ref in batch:
            s = store[ref]
            s = SliceSample(normalize(s.image), s.label, s.volume_id, s.slice_index)
            if do_aug:
                s = augment(s, aug_rng, policy)
            images.append(s.image)
            labels.append(s.label)
        yield np.stack(images)[:, None].astype(np.float32), np.stack(labels).astype(np.int64)
