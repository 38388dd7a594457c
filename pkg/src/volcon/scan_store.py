"""Scans as ordered slice stacks, the VOLC binary format, and synthetic volumes.

VOLC v1 layout (all integers little-endian):

    b"VOLC"  u32 version  u32 N
    per scan:  u32 id_len, id bytes (UTF-8), u32 L, u32 H, u32 W, u32 C,
               u8 has_label, [u16 label if has_label]
    payload:   float32 LE, scan by scan, slice-major, each slice H*W*C row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError, FormatError, PersistenceError, RangeError

MAGIC = b"VOLC"
VERSION = 1


@dataclass(frozen=True, eq=False)
class Scan:
    """One volume: ``slices`` has shape (L, H, W, C), float32 in [0, 1]."""

    id: str
    slices: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        s = np.asarray(self.slices)
        if s.ndim != 4:
            raise ContractError(f"scan {self.id!r}: slices must be (L, H, W, C), got shape {s.shape}")
        if s.shape[0] < 1 or min(s.shape[1:]) < 1:
            raise ContractError(f"scan {self.id!r}: empty dimension in shape {s.shape}")
        s = np.ascontiguousarray(s, dtype=np.float32)
        if not np.all(np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0:
            raise RangeError(f"scan {self.id!r}: intensities must be finite and in [0, 1]")
        if self.label is not None and not (0 <= int(self.label) < 2**16):
            raise ContractError(f"scan {self.id!r}: label {self.label} does not fit in u16")
        s.setflags(write=False)
        object.__setattr__(self, "slices", s)

    @property
    def n_slices(self) -> int:
        return self.slices.shape[0]

    @property
    def slice_shape(self) -> tuple:
        return self.slices.shape[1:]

    def __eq__(self, other):
        if not isinstance(other, Scan):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.slices.shape == other.slices.shape
            and self.slices.tobytes() == other.slices.tobytes()
        )


@dataclass(frozen=True)
class ScanDataset:
    scans: tuple
    name: str = "dataset"

    def __post_init__(self):
        scans = tuple(self.scans)
        if len(scans) < 1:
            raise ContractError("dataset must contain at least one scan")
        ids = [s.id for s in scans]
        if len(set(ids)) != len(ids):
            raise ContractError("scan ids must be unique")
        object.__setattr__(self, "scans", scans)

    def __len__(self):
        return len(self.scans)

    def __getitem__(self, i) -> Scan:
        return self.scans[i]

    @property
    def lengths(self) -> list:
        return [s.n_slices for s in self.scans]

    @property
    def flat_size(self) -> int:
        return sum(self.lengths)

    @property
    def labeled(self) -> bool:
        return all(s.label is not None for s in self.scans)

    def get_slice(self, ref: "SliceRef") -> np.ndarray:
        return self.scans[ref.scan_index].slices[ref.slice_index]


class SliceRef(NamedTuple):
    scan_index: int
    slice_index: int


def flatten(dataset: ScanDataset) -> list:
    """Every (scan, slice) pair once, scan-major with slice order kept."""
    return [SliceRef(i, j) for i, scan in enumerate(dataset.scans) for j in range(scan.n_slices)]


# --------------------------------------------------------------------------
# VOLC persistence
# --------------------------------------------------------------------------

def encode_dataset(dataset: ScanDataset) -> bytes:
    if not isinstance(dataset, ScanDataset) or len(dataset.scans) < 1:
        raise ContractError("cannot save an empty dataset")
    header = [MAGIC, struct.pack("<II", VERSION, len(dataset.scans))]
    for scan in dataset.scans:
        raw_id = scan.id.encode("utf-8")
        L, H, W, C = scan.slices.shape
        header.append(struct.pack("<I", len(raw_id)))
        header.append(raw_id)
        header.append(struct.pack("<IIII", L, H, W, C))
        if scan.label is None:
            header.append(struct.pack("<B", 0))
        else:
            header.append(struct.pack("<BH", 1, int(scan.label)))
    payload = [scan.slices.astype("<f4", copy=False).tobytes() for scan in dataset.scans]
    return b"".join(header + payload)


def save_dataset(dataset: ScanDataset, path) -> None:
    blob = encode_dataset(dataset)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise PersistenceError(f"cannot write dataset to {path}: {exc}") from exc


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated file while reading {field}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def decode_dataset(blob: bytes, name: str = "dataset") -> ScanDataset:
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: expected b'VOLC'")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    (n,) = r.unpack("<I", "scan count")
    if n < 1:
        raise FormatError("scan count: dataset must hold at least one scan")
    headers = []
    for i in range(n):
        (id_len,) = r.unpack("<I", f"scan[{i}].id length")
        try:
            scan_id = r.take(id_len, f"scan[{i}].id").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"scan[{i}].id is not valid UTF-8") from exc
        dims = r.unpack("<IIII", f"scan[{i}].shape")
        if min(dims) < 1:
            raise FormatError(f"scan[{i}].shape has a zero dimension: {dims}")
        (flag,) = r.unpack("<B", f"scan[{i}].label flag")
        if flag not in (0, 1):
            raise FormatError(f"scan[{i}].label flag must be 0 or 1, got {flag}")
        label = r.unpack("<H", f"scan[{i}].label")[0] if flag else None
        headers.append((scan_id, dims, label))
    scans = []
    for i, (scan_id, dims, label) in enumerate(headers):
        count = int(np.prod(dims))
        raw = r.take(4 * count, f"scan[{i}].slice data")
        data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise RangeError(f"scan[{i}].slice data: intensity outside [0, 1]")
        scans.append(Scan(scan_id, data, label))
    if r.pos != len(blob):
        raise FormatError(f"trailing bytes after payload ({len(blob) - r.pos} extra)")
    try:
        return ScanDataset(tuple(scans), name)
    except ContractError as exc:
        raise FormatError(f"scan ids: {exc}") from exc


def load_dataset(path) -> ScanDataset:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read dataset {path}: {exc}") from exc
    try:
        return decode_dataset(blob, name=path.stem)
    except FormatError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# Synthetic volumes
# --------------------------------------------------------------------------

# Per-scan nuisance ranges. Brightness, contrast, blur and noise are exactly
# the factors the augmentations perturb, so they hide the class from an
# untrained encoder without being learnable instance cues.
N_CELLS = 12
CELL_SIZE = 0.06
CELL_ASPECT = 2.5
CELL_AMP = 0.4
ORIENTATION_SD = 0.3


def _class_angle(label: int, n_classes: int) -> float:
    # Angles stay in [0, pi/2] so a horizontal flip never maps one class onto another.
    return 0.0 if n_classes == 1 else 0.5 * np.pi * label / (n_classes - 1)


def generate_synthetic_dataset(n_scans: int, slices_per_scan: int, h: int, w: int, c: int,
                               n_classes: int, seed: int, *, name: str = "synthetic") -> ScanDataset:
    """Labeled toy volumes of oriented elongated cells.

    The class sets the mean orientation of a scan's cells. Cells drift and
    turn slowly with depth, so adjacent slices are more alike than distant
    ones. Each scan also gets its own offset, gain, blur and noise level.
    """
    for flag, value in (("n_scans", n_scans), ("slices_per_scan", slices_per_scan), ("h", h),
                        ("w", w), ("c", c), ("n_classes", n_classes)):
        if int(value) < 1:
            raise ContractError(f"{flag} must be >= 1, got {value}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x5CA7])
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    L = slices_per_scan
    depth = np.linspace(0.0, 1.0, L) if L > 1 else np.zeros(1)
    sa = CELL_SIZE * np.sqrt(CELL_ASPECT)
    sb = CELL_SIZE / np.sqrt(CELL_ASPECT)

    scans = []
    for i in range(n_scans):
        label = int(rng.integers(n_classes))
        phi = _class_angle(label, n_classes) + rng.normal(0.0, ORIENTATION_SD)
        centers = rng.uniform(0.0, 1.0, size=(N_CELLS, 2))
        drift = rng.uniform(-0.15, 0.15, size=(N_CELLS, 2))
        angles = phi + rng.normal(0.0, 0.15, size=N_CELLS)
        base = rng.uniform(0.0, 0.3)
        gain = rng.uniform(0.5, 1.5)
        blur = rng.uniform(0.0, 1.0)
        noise = rng.uniform(0.01, 0.05)
        vol = np.empty((L, h, w, c), dtype=np.float32)
        for j, t in enumerate(depth):
            cy = centers[:, 0] + drift[:, 0] * (t - 0.5)
            cx = centers[:, 1] + drift[:, 1] * (t - 0.5)
            a = angles + 0.3 * (t - 0.5)
            dy = yy[None] - cy[:, None, None]
            dx = xx[None] - cx[:, None, None]
            cos, sin = np.cos(a)[:, None, None], np.sin(a)[:, None, None]
            u = dy * cos + dx * sin
            v = -dy * sin + dx * cos
            img = CELL_AMP * np.exp(-0.5 * ((u / sa) ** 2 + (v / sb) ** 2)).sum(axis=0)
            if blur > 0.05:
                img = gaussian_filter(img, blur)
            img = base + gain * img
            vol[j] = np.clip(img[:, :, None] + rng.normal(0.0, noise, size=(h, w, c)), 0.0, 1.0)
        scans.append(Scan(f"scan{i:05d}", vol, label))
    return ScanDataset(tuple(scans), name)
