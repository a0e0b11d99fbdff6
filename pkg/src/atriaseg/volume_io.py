"""Minimal NIfTI-1 reading/writing and slice decomposition.

Only ``dim``, ``datatype``, ``pixdim``, ``vox_offset`` and the intensity
scaling fields are interpreted.  Any other header bytes (orientation, qform,
sform, descriptions) are carried through unchanged when a volume that was
loaded from disk is written back out.

Arrays are held as ``(depth, height, width)``; on disk this is NIfTI axis
order ``(x=width, y=height, z=depth)``, so slices run along the third NIfTI
axis.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABEL_VALUES = (0, 1, 2, 3)
HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class VolumeError(ValueError):
    """Base class for volume loading/validation failures."""


class FormatError(VolumeError):
    pass


class AlignmentError(VolumeError):
    pass


class LabelValueError(VolumeError):
    pass


@dataclass(eq=False)
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""
    header: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_grid(self.voxels.shape, self.spacing, self.id)
        if not np.isfinite(self.voxels).all():
            raise VolumeError(f"volume {self.id!r} contains non-finite voxels")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass(eq=False)
class LabelVolume:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""
    header: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.array_equal(labels, np.round(labels)):
                raise LabelValueError(f"label volume {self.id!r} holds non-integer values")
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_grid(labels.shape, self.spacing, self.id)
        validate_labels(labels, self.id)
        self.labels = labels.astype(np.uint8)

    @property
    def shape(self):
        return self.labels.shape


@dataclass(eq=False)
class SliceSample:
    image: np.ndarray
    label: np.ndarray
    volume_id: str
    slice_index: int

    def __post_init__(self):
        if self.image.shape != self.label.shape or self.image.ndim != 2:
            raise AlignmentError(
                f"slice {self.volume_id}:{self.slice_index} image {self.image.shape} "
                f"and label {self.label.shape} differ"
            )

    @property
    def ref(self) -> tuple[str, int]:
        return (self.volume_id, self.slice_index)


def _check_grid(shape, spacing, vid):
    if len(shape) != 3:
        raise VolumeError(f"volume {vid!r} must be 3D, got shape {shape}")
    if shape[0] < 1:
        raise VolumeError(f"volume {vid!r} has zero depth")
    if shape[1] != shape[2]:
        raise VolumeError(f"volume {vid!r} in-plane size must be square, got {shape[1]}x{shape[2]}")
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise VolumeError(f"volume {vid!r} spacing must be three positive reals, got {spacing}")


def validate_labels(labels: np.ndarray, vid: str = "") -> None:
    """Raise :class:`LabelValueError` naming every value outside {0, 1, 2, 3}."""
    values = np.unique(labels)
    bad = [v.item() for v in values if v not in LABEL_VALUES]
    if bad:
        raise LabelValueError(f"label volume {vid!r} contains invalid values {bad}; allowed {LABEL_VALUES}")


# -- raw NIfTI -------------------------------------------------------------------


def _open(path: Path, mode: str):
    if path.name.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float], bytes]:
    """Read a 3D NIfTI-1 file.

    Returns ``(array, spacing, header)`` where ``array`` is ``(z, y, x)``
    ordered, ``spacing`` matches that order and ``header`` is the raw
    348-byte header.
    """
    path = Path(path)
    try:
        with _open(path, "rb") as f:
            raw = f.read()
    except (OSError, EOFError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file too short for a NIfTI-1 header")
    hdr = raw[:HEADER_SIZE]
    for endian in "<>":
        if struct.unpack(endian + "i", hdr[:4])[0] == HEADER_SIZE:
            break
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")
    if hdr[344:348] not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: missing NIfTI-1 magic")
    dim = struct.unpack(endian + "8h", hdr[40:56])
    datatype = struct.unpack(endian + "h", hdr[70:72])[0]
    pixdim = struct.unpack(endian + "8f", hdr[76:108])
    vox_offset = int(struct.unpack(endian + "f", hdr[108:112])[0])
    slope, inter = struct.unpack(endian + "2f", hdr[112:120])

    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise FormatError(f"{path}: expected a 3D grid, got dim={dim[: ndim + 1]}")
    nx, ny, nz = dim[1:4]
    if datatype not in _DTYPES:
        raise FormatError(f"{path}: unsupported NIfTI datatype {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(endian)
    count = nx * ny * nz
    nbytes = count * dtype.itemsize
    if len(raw) < vox_offset + nbytes:
        raise FormatError(f"{path}: truncated voxel data")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    # NIfTI is x-fastest, which is C order for (z, y, x)
    arr = data.reshape(nz, ny, nx).astype(dtype.newbyteorder("="))
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * np.float32(slope if slope != 0.0 else 1.0) + np.float32(inter)
    spacing = (abs(pixdim[3]) or 1.0, abs(pixdim[2]) or 1.0, abs(pixdim[1]) or 1.0)
    return arr, spacing, hdr if endian == "<" else None


def write_nifti(path, array: np.ndarray, spacing, header: bytes | None = None) -> None:
    """Write a ``(z, y, x)`` array as little-endian NIfTI-1 (gzipped if ``.gz``)."""
    path = Path(path)
    array = np.ascontiguousarray(array)
    if array.dtype not in _CODES:
        raise FormatError(f"dtype {array.dtype} has no NIfTI code")
    nz, ny, nx = array.shape
    hdr = bytearray(header if header is not None else bytes(HEADER_SIZE))
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    code = _CODES[array.dtype]
    struct.pack_into("<2h", hdr, 70, code, array.dtype.itemsize * 8)
    old_pixdim = struct.unpack_from("<8f", hdr, 76)
    qfac = old_pixdim[0] if old_pixdim[0] in (-1.0, 1.0) else 1.0
    struct.pack_into("<8f", hdr, 76, qfac, spacing[2], spacing[1], spacing[0], 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    if header is None:
        struct.pack_into("<h", hdr, 252, 0)  # qform_code
        struct.pack_into("<h", hdr, 254, 0)  # sform_code
    hdr[344:348] = b"n+1\x00"
    payload = bytes(hdr) + b"\x00" * 4 + array.astype(array.dtype.newbyteorder("<")).tobytes()
    try:
        with _open(path, "wb") as f:
            f.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# -- volume API -------------------------------------------------------------------


def _case_id(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    # <root>/<case_id>/image.nii.gz layout names the case after the directory
    if name in ("image", "label"):
        return path.parent.name
    return name


def load_volume(path) -> Volume:
    arr, spacing, hdr = read_nifti(path)
    return Volume(arr.astype(np.float32), spacing, _case_id(Path(path)), hdr)


def load_label_volume(path) -> LabelVolume:
    arr, spacing, hdr = read_nifti(path)
    if not np.issubdtype(arr.dtype, np.integer) and not np.array_equal(arr, np.round(arr)):
        raise LabelValueError(f"{path}: label volume holds non-integer values")
    validate_labels(arr, str(path))
    return LabelVolume(arr.astype(np.int64), spacing, _case_id(Path(path)), hdr)


def check_aligned(volume: Volume, labels: LabelVolume) -> None:
    if volume.shape != labels.shape:
        raise AlignmentError(
            f"image {volume.id!r} has dims {volume.shape} but label {labels.id!r} has {labels.shape}"
        )
    if not np.allclose(volume.spacing, labels.spacing, rtol=1e-6):
        raise AlignmentError(f"image spacing {volume.spacing} differs from label spacing {labels.spacing}")


def load_volume_pair(image_path, label_path) -> tuple[Volume, LabelVolume]:
    volume = load_volume(image_path)
    labels = load_label_volume(label_path)
    check_aligned(volume, labels)
    return volume, labels


def save_volume(volume: Volume, path) -> None:
    write_nifti(path, volume.voxels.astype(np.float32), volume.spacing, volume.header)


def save_label_volume(labels: LabelVolume, path) -> None:
    validate_labels(labels.labels, labels.id)
    write_nifti(path, labels.labels.astype(np.uint8), labels.spacing, labels.header)


def extract_slices(volume: Volume, labels: LabelVolume) -> list[SliceSample]:
    """Split an aligned pair into depth-ordered 2D samples."""
    check_aligned(volume, labels)
    return [
        SliceSample(volume.voxels[k], labels.labels[k], volume.id, k)
        for k in range(volume.shape[0])
    ]


def stack_slices(slices: list[SliceSample]) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`extract_slices`: ``(voxels, labels)`` stacked in slice-index order."""
    ordered = sorted(slices, key=lambda s: s.slice_index)
    return np.stack([s.image for s in ordered]), np.stack([s.label for s in ordered])


# -- dataset directory ---------------------------------------------------------

INDEX_FILE = "dataset.json"


def case_paths(root, case_id: str) -> tuple[Path, Path]:
    case = Path(root) / case_id
    return case / "image.nii.gz", case / "label.nii.gz"


def write_case(root, volume: Volume, labels: LabelVolume) -> None:
    check_aligned(volume, labels)
    image_path, label_path = case_paths(root, volume.id)
    image_path.parent.mkdir(parents=True, exist_ok=True)
    save_volume(volume, image_path)
    save_label_volume(labels, label_path)


def write_index(root, volumes: list[Volume]) -> Path:
    index = {
        "cases": [
            {"id": v.id, "dims": list(v.shape), "spacing": list(v.spacing)} for v in volumes
        ]
    }
    path = Path(root) / INDEX_FILE
    path.write_text(json.dumps(index, indent=2))
    return path


def read_index(root) -> list[dict]:
    path = Path(root) / INDEX_FILE
    try:
        return json.loads(path.read_text())["cases"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read dataset index {path}: {exc}") from exc


def load_dataset(root) -> list[tuple[Volume, LabelVolume]]:
    """Load every case listed in ``<root>/dataset.json``."""
    pairs = []
    for case in read_index(root):
        pair = load_volume_pair(*case_paths(root, case["id"]))
        if list(pair[0].shape) != list(case["dims"]):
            raise AlignmentError(f"case {case['id']!r} dims {pair[0].shape} disagree with index {case['dims']}")
        pairs.append(pair)
    return pairs
