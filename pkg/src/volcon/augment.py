"""Random view generation for single slices and for shared-crop slice sets.

The pipeline is crop -> bilinear resize -> horizontal flip -> Gaussian blur
-> brightness/contrast jitter -> clip to [0, 1]. Images are H x W x C.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ContractError


@dataclass(frozen=True)
class AugmentSpec:
    out_size: int = 32
    crop_scale_range: tuple = (0.2, 1.0)
    hflip_prob: float = 0.5
    blur_prob: float = 0.5
    blur_sigma_range: tuple = (0.1, 2.0)
    jitter_strength: float = 0.4
    crop_enabled: bool = True
    flip_enabled: bool = True
    blur_enabled: bool = True
    jitter_enabled: bool = True
    # False shares only the crop box across a set; flip/blur/jitter are drawn per slice.
    share_full_transform: bool = True

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ContractError(f"crop_scale_range must satisfy 0 < low <= high <= 1, got {self.crop_scale_range}")
        slo, shi = self.blur_sigma_range
        if not (0.0 < slo <= shi):
            raise ContractError(f"blur_sigma_range must satisfy 0 < low <= high, got {self.blur_sigma_range}")
        for name in ("hflip_prob", "blur_prob"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ContractError(f"{name} must lie in [0, 1], got {p}")
        if not (0.0 <= self.jitter_strength < 1.0):
            raise ContractError(f"jitter_strength must lie in [0, 1), got {self.jitter_strength}")
        if int(self.out_size) < 8:
            raise ContractError(f"out_size must be >= 8, got {self.out_size}")
        object.__setattr__(self, "crop_scale_range", (float(lo), float(hi)))
        object.__setattr__(self, "blur_sigma_range", (float(slo), float(shi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale_range"] = list(self.crop_scale_range)
        d["blur_sigma_range"] = list(self.blur_sigma_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ContractError(f"unknown augment key(s): {', '.join(unknown)}")
        d = dict(d)
        for key in ("crop_scale_range", "blur_sigma_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class CropBox(NamedTuple):
    top: int
    left: int
    height: int
    width: int


@dataclass(frozen=True)
class AugmentParams:
    crop: CropBox
    out_size: int
    flip: bool = False
    blur_sigma: Optional[float] = None
    brightness: float = 1.0
    contrast: float = 1.0


def identity_params(source_hw: tuple) -> AugmentParams:
    h, w = source_hw
    if h != w:
        raise ContractError("identity params need a square source")
    return AugmentParams(CropBox(0, 0, h, w), out_size=h)


def _center_crop(h: int, w: int, ratio_lo: float, ratio_hi: float) -> CropBox:
    in_ratio = w / h
    if in_ratio < ratio_lo:
        cw, ch = w, int(round(w / ratio_lo))
    elif in_ratio > ratio_hi:
        ch, cw = h, int(round(h * ratio_hi))
    else:
        ch, cw = h, w
    ch, cw = max(1, min(ch, h)), max(1, min(cw, w))
    return CropBox((h - ch) // 2, (w - cw) // 2, ch, cw)


def _draw_crop(spec: AugmentSpec, h: int, w: int, rng: np.random.Generator) -> CropBox:
    if not spec.crop_enabled:
        return CropBox(0, 0, h, w)
    lo, hi = spec.crop_scale_range
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        ratio = rng.uniform(3 / 4, 4 / 3)
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 1 <= cw <= w and 1 <= ch <= h:
            top = int(rng.integers(h - ch + 1))
            left = int(rng.integers(w - cw + 1))
            return CropBox(top, left, ch, cw)
    return _center_crop(h, w, 3 / 4, 4 / 3)


def _draw_photometric(spec: AugmentSpec, rng: np.random.Generator) -> dict:
    # Every draw is consumed regardless of the enabled flags so that toggling
    # a transform does not shift the random stream of the others.
    flip_u = rng.uniform()
    blur_u = rng.uniform()
    sigma = rng.uniform(*spec.blur_sigma_range)
    s = spec.jitter_strength
    brightness = rng.uniform(1.0 - s, 1.0 + s)
    contrast = rng.uniform(1.0 - s, 1.0 + s)
    return {
        "flip": bool(spec.flip_enabled and flip_u < spec.hflip_prob),
        "blur_sigma": float(sigma) if spec.blur_enabled and blur_u < spec.blur_prob else None,
        "brightness": float(brightness) if spec.jitter_enabled else 1.0,
        "contrast": float(contrast) if spec.jitter_enabled else 1.0,
    }


def draw_params(spec: AugmentSpec, source_hw: tuple, rng: np.random.Generator) -> AugmentParams:
    h, w = int(source_hw[0]), int(source_hw[1])
    if h < 1 or w < 1:
        raise ContractError(f"source must be at least 1x1, got {source_hw}")
    crop = _draw_crop(spec, h, w, rng)
    return AugmentParams(crop, spec.out_size, **_draw_photometric(spec, rng))


def _resize_axis_weights(n_in: int, n_out: int):
    # half-pixel centres
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    r0, r1, fr = _resize_axis_weights(h, out_h)
    c0, c1, fc = _resize_axis_weights(w, out_w)
    rows = img[r0] * (1.0 - fr)[:, None, None] + img[r1] * fr[:, None, None]
    return rows[:, c0] * (1.0 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    out = gaussian_filter1d(img, sigma, axis=0, mode="reflect")
    return gaussian_filter1d(out, sigma, axis=1, mode="reflect")


def apply(params: AugmentParams, slice_: np.ndarray) -> np.ndarray:
    """Render one view; returns a float64 array of shape (D, D, C) in [0, 1]."""
    img = np.asarray(slice_, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ContractError(f"slice must be H x W x C, got shape {img.shape}")
    h, w = img.shape[:2]
    box = params.crop
    if (box.height < 1 or box.width < 1 or box.top < 0 or box.left < 0
            or box.top + box.height > h or box.left + box.width > w):
        raise ContractError(f"crop box {tuple(box)} falls outside a {h}x{w} slice")
    out = img[box.top:box.top + box.height, box.left:box.left + box.width]
    out = resize_bilinear(out, params.out_size, params.out_size)
    if params.flip:
        out = out[:, ::-1]
    if params.blur_sigma is not None:
        out = gaussian_blur(out, params.blur_sigma)
    if params.brightness != 1.0 or params.contrast != 1.0:
        out = out * params.brightness
        mean = out.mean()
        out = (out - mean) * params.contrast + mean
    return np.clip(out, 0.0, 1.0)


def apply_set(spec: AugmentSpec, slices: Sequence[np.ndarray], rng: np.random.Generator):
    """Augment K slices with one shared crop.

    Returns ``(views, params)`` where ``params[i]`` rendered ``views[i]``.
    With ``spec.share_full_transform`` every slice gets the identical draw.
    """
    if len(slices) < 1:
        raise ContractError("apply_set needs at least one slice")
    shapes = {np.shape(s) for s in slices}
    if len(shapes) != 1:
        raise ContractError(f"all slices in a set must share a shape, got {sorted(shapes)}")
    shape = next(iter(shapes))
    shared = draw_params(spec, shape[:2], rng)
    if spec.share_full_transform:
        params = [shared] * len(slices)
    else:
        params = [shared] + [
            AugmentParams(shared.crop, spec.out_size, **_draw_photometric(spec, rng))
            for _ in range(len(slices) - 1)
        ]
    return [apply(p, s) for p, s in zip(params, slices)], params
