"""Synthetic bi-atrial phantoms with exact ground truth.

Two ellipsoidal cavities (label 2 right, label 3 left) each wrapped in a wall
shell (label 1) produced by 6-connected dilation.  Intensities follow the LGE
ordering wall > cavity > background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import LabelVolume, Volume

BACKGROUND_LEVEL = 0.2
CAVITY_LEVEL = 0.5
WALL_LEVEL = 0.8

_CROSS = ndimage.generate_binary_structure(3, 1)


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    depth: int = 16
    height: int = 96
    width: int = 96
    wall_thickness_voxels: int = 2
    noise_std: float = 0.05
    seed: int = 0
    cavity_count: int = 2

    def __post_init__(self):
        if min(self.depth, self.height, self.width) < 1:
            raise PhantomError("phantom dims must be positive")
        if self.height != self.width:
            raise PhantomError("phantom height and width must be equal")
        if self.height % 32:
            raise PhantomError("phantom in-plane size must be divisible by 32")
        if self.wall_thickness_voxels < 1:
            raise PhantomError("wall_thickness_voxels must be >= 1")
        if self.noise_std < 0:
            raise PhantomError("noise_std must be non-negative")
        if self.cavity_count != 2:
            raise PhantomError("cavity_count is fixed at 2")


def _ellipsoid(shape, center, axes) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    r = ((zz - center[0]) / axes[0]) ** 2 + ((yy - center[1]) / axes[1]) ** 2 + ((xx - center[2]) / axes[2]) ** 2
    return r <= 1.0


def _wall(cavity: np.ndarray, t: int) -> np.ndarray:
    return ndimage.binary_dilation(cavity, _CROSS, iterations=t) & ~cavity


def _sample_cavity(rng, shape, t, side):
    d, h, w = shape
    margin = t + 1
    az_max = (d - 2 * margin) / 2
    ay_max = (h - 2 * margin) / 2
    ax_max = (w / 2 - 2 * margin) / 2
    if min(az_max, ay_max, ax_max) < 1.0:
        raise PhantomError(f"dims {shape} too small for two cavities with wall thickness {t}")
    axes = (
        rng.uniform(max(1.0, 0.5 * az_max), az_max),
        rng.uniform(max(1.0, 0.35 * ay_max), 0.8 * ay_max),
        rng.uniform(max(1.0, 0.5 * ax_max), ax_max),
    )
    # right cavity occupies the left image half, left cavity the right half
    x_lo = margin + axes[2] + (0 if side == 0 else w / 2)
    x_hi = (w / 2 if side == 0 else w) - margin - axes[2]
    center = (
        rng.uniform(margin + axes[0], d - 1 - margin - axes[0]) if d - 1 - 2 * (margin + axes[0]) > 0 else (d - 1) / 2,
        rng.uniform(margin + axes[1], h - 1 - margin - axes[1]),
        rng.uniform(x_lo, max(x_lo, x_hi)),
    )
    return center, axes


def generate_phantom(config: PhantomConfig, case_id: str | None = None, max_tries: int = 100) -> tuple[Volume, LabelVolume]:
    """Deterministically generate one (Volume, LabelVolume) pair from ``config``."""
    shape = (config.depth, config.height, config.width)
    t = config.wall_thickness_voxels
    rng = np.random.default_rng(config.seed)
    for _ in range(max_tries):
        cavities = []
        for side in (0, 1):
            center, axes = _sample_cavity(rng, shape, t, side)
            cavities.append(_ellipsoid(shape, center, axes))
        right, left = cavities
        if not right.any() or not left.any():
            continue
        grown_r = ndimage.binary_dilation(right, _CROSS, iterations=t + 1)
        grown_l = ndimage.binary_dilation(left, _CROSS, iterations=t)
        if (grown_r & grown_l).any():
            continue
        if any(ndimage.label(c, _CROSS)[1] != 1 for c in cavities):
            continue
        break
    else:
        raise PhantomError(f"could not place two disjoint walled cavities in dims {shape}")

    labels = np.zeros(shape, dtype=np.uint8)
    labels[_wall(right, t) | _wall(left, t)] = 1
    labels[right] = 2
    labels[left] = 3

    levels = np.array([BACKGROUND_LEVEL, WALL_LEVEL, CAVITY_LEVEL, CAVITY_LEVEL], dtype=np.float32)
    voxels = levels[labels]
    if config.noise_std > 0:
        voxels = voxels + rng.normal(0.0, config.noise_std, size=shape).astype(np.float32)
    voxels = np.clip(voxels, 0.0, 1.0).astype(np.float32)

    cid = case_id if case_id is not None else f"phantom_{config.seed:04d}"
    return Volume(voxels, (1.0, 1.0, 1.0), cid), LabelVolume(labels, (1.0, 1.0, 1.0), cid)


def generate_dataset(root, count: int, depth: int = 16, size: int = 96, noise_std: float = 0.05,
                     seed: int = 0, wall_thickness_voxels: int = 2) -> list[str]:
    """Write ``count`` phantoms under ``root`` using the case-directory layout plus ``dataset.json``."""
    from .volume_io import write_case, write_index

    volumes = []
    for i in range(count):
        cfg = PhantomConfig(depth, size, size, wall_thickness_voxels, noise_std, seed=seed * 100_003 + i)
        vol, lab = generate_phantom(cfg, case_id=f"case_{i:03d}")
        write_case(root, vol, lab)
        volumes.append(vol)
    write_index(root, volumes)
    return [v.id for v in volumes]
