"""View sourcing: flat baseline draws, per-scan windows, and equidistant slice sets.

All samplers take a ``numpy.random.Generator`` and are otherwise pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .errors import ContractError
from .scan_store import ScanDataset, SliceRef


@dataclass(frozen=True)
class WindowParams:
    omega: float = 0.5
    t_threshold: int = 5
    k_set: int = 3

    def __post_init__(self):
        if not (0.0 < self.omega <= 1.0):
            raise ContractError(f"omega must lie in (0, 1], got {self.omega}")
        if int(self.t_threshold) < 1:
            raise ContractError(f"t_threshold must be >= 1, got {self.t_threshold}")
        if int(self.k_set) < 1:
            raise ContractError(f"k_set must be >= 1, got {self.k_set}")


class Window(NamedTuple):
    scan_index: int
    start: int
    end_exclusive: int

    @property
    def width(self) -> int:
        return self.end_exclusive - self.start


class PairKind(str, Enum):
    BASELINE = "BaselinePair"
    PS = "PsPair"


class PairSample(NamedTuple):
    kind: PairKind
    first: SliceRef
    second: SliceRef


class SetSample(NamedTuple):
    scan_index: int
    set_a: tuple
    set_b: tuple
    window_a: Window
    window_b: Window


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def window_width(length: int, omega: float) -> int:
    return min(length, max(1, round_half_up(omega * length)))


def sample_baseline(dataset: ScanDataset, rng: np.random.Generator) -> PairSample:
    """Uniform draw over all slices of all scans; both views share the slice."""
    lengths = np.asarray(dataset.lengths)
    k = int(rng.integers(int(lengths.sum())))
    scan_index = int(np.searchsorted(np.cumsum(lengths), k, side="right"))
    offset = k - int(lengths[:scan_index].sum())
    ref = SliceRef(scan_index, offset)
    return PairSample(PairKind.BASELINE, ref, ref)


def sample_window(length: int, omega: float, rng: np.random.Generator) -> tuple:
    """In-bounds window of width max(1, round(omega * length))."""
    if length < 1:
        raise ContractError(f"length must be >= 1, got {length}")
    if not (0.0 < omega <= 1.0):
        raise ContractError(f"omega must lie in (0, 1], got {omega}")
    w = window_width(length, omega)
    start = int(rng.integers(length - w + 1))
    return start, start + w


def sample_ps_pair(dataset: ScanDataset, scan_index: int, params: WindowParams,
                   rng: np.random.Generator) -> PairSample:
    if not (0 <= scan_index < len(dataset)):
        raise ContractError(f"scan_index {scan_index} out of range for {len(dataset)} scans")
    length = dataset[scan_index].n_slices
    if length < params.t_threshold:
        ref = SliceRef(scan_index, int(rng.integers(length)))
        return PairSample(PairKind.BASELINE, ref, ref)
    start, end = sample_window(length, params.omega, rng)
    a, b = rng.integers(start, end, size=2)
    return PairSample(PairKind.PS, SliceRef(scan_index, int(a)), SliceRef(scan_index, int(b)))


def equidistant_indices(window: Window, k: int) -> list:
    """K indices spread evenly from the first to the last slice of ``window``.

    K = 1 picks the (lower) midpoint; K > width repeats indices.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    w = window.width
    if k == 1:
        return [window.start + (w - 1) // 2]
    # integer arithmetic keeps the half-way cases exact
    return [window.start + (2 * l * (w - 1) + (k - 1)) // (2 * (k - 1)) for l in range(k)]


def sample_ds_views(dataset: ScanDataset, scan_index: int, params: WindowParams,
                    rng: np.random.Generator) -> SetSample:
    if not (0 <= scan_index < len(dataset)):
        raise ContractError(f"scan_index {scan_index} out of range for {len(dataset)} scans")
    length = dataset[scan_index].n_slices
    win_a = Window(scan_index, *sample_window(length, params.omega, rng))
    win_b = Window(scan_index, *sample_window(length, params.omega, rng))
    return SetSample(
        scan_index,
        tuple(equidistant_indices(win_a, params.k_set)),
        tuple(equidistant_indices(win_b, params.k_set)),
        win_a,
        win_b,
    )


def sample_scan_index(dataset: ScanDataset, rng: np.random.Generator) -> int:
    """Scans are picked uniformly, not weighted by length."""
    return int(rng.integers(len(dataset)))
