"""Run configuration: dataclass, variant presets and JSON (de)serialisation."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .augment import AugmentSpec
from .errors import ContractError
from .model import DsHead, ModelConfig, Variant
from .sampling import WindowParams

# Published defaults. Window keys a variant does not use stay None.
PAPER_COMMON = dict(epochs=100, batch_size=32, lr0=0.07, weight_decay=1e-10)
PAPER_PRESETS = {
    Variant.BASELINE: dict(image_size=224),
    Variant.PER_SCAN: dict(image_size=224, omega=0.1, t_threshold=5),
    Variant.DEEP_SET: dict(image_size=128, omega=0.5, k_set=3),
}

# Small enough to train on one CPU core in well under a minute per variant.
# A sharper temperature and milder crops let 500 small steps make headway.
DESK_COMMON = dict(epochs=1, steps_per_epoch=500, batch_size=8, lr0=1e-3, weight_decay=1e-10,
                   image_size=32, temperature=0.2,
                   augment=dict(crop_scale_range=(0.5, 1.0)))

WINDOW_KEYS = {
    Variant.BASELINE: (),
    Variant.PER_SCAN: ("omega", "t_threshold"),
    Variant.DEEP_SET: ("omega", "k_set"),
}


@dataclass(frozen=True)
class TrainConfig:
    variant: Variant = Variant.BASELINE
    epochs: int = 100
    steps_per_epoch: Optional[int] = None
    batch_size: int = 32
    lr0: float = 0.07
    weight_decay: float = 1e-10
    temperature: float = 0.5
    image_size: int = 224
    omega: Optional[float] = None
    t_threshold: Optional[int] = None
    k_set: Optional[int] = None
    ds_head: DsHead = DsHead.IDENTITY
    feature_dim: int = 64
    proj_dim: int = 32
    channels: tuple = (8, 16, 32, 32)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0
    output_dir: Optional[str] = None

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)
        set_("variant", Variant(self.variant))
        set_("ds_head", DsHead(self.ds_head))
        set_("channels", tuple(int(c) for c in self.channels))
        if isinstance(self.augment, dict):
            set_("augment", AugmentSpec.from_dict(self.augment))
        if self.augment.out_size != self.image_size:
            set_("augment", dataclasses.replace(self.augment, out_size=int(self.image_size)))
        if int(self.epochs) < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.steps_per_epoch is not None and int(self.steps_per_epoch) < 1:
            raise ContractError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        if int(self.batch_size) < 2:
            raise ContractError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.lr0 > 0:
            raise ContractError(f"lr0 must be > 0, got {self.lr0}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")
        # validates ranges of whichever window keys are set
        self.window_params()

    def window_params(self) -> WindowParams:
        base = WindowParams()
        return WindowParams(
            omega=base.omega if self.omega is None else float(self.omega),
            t_threshold=base.t_threshold if self.t_threshold is None else int(self.t_threshold),
            k_set=base.k_set if self.k_set is None else int(self.k_set),
        )

    def model_config(self, in_channels: int = 1) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, image_size=self.image_size, in_channels=in_channels,
            channels=self.channels, feature_dim=self.feature_dim, proj_dim=self.proj_dim,
            ds_head=self.ds_head, temperature=self.temperature,
        )

    def resolved_steps_per_epoch(self, flat_size: int) -> int:
        if self.steps_per_epoch is not None:
            return int(self.steps_per_epoch)
        return max(1, math.ceil(flat_size / self.batch_size))

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (Variant, DsHead)):
                v = v.value
            elif isinstance(v, AugmentSpec):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    def manifest(self) -> dict:
        """Config echo with window keys the variant does not use shown as null."""
        d = self.to_dict()
        used = WINDOW_KEYS[self.variant]
        for key in ("omega", "t_threshold", "k_set"):
            if key not in used:
                d[key] = None
        if self.variant is not Variant.DEEP_SET:
            d["ds_head"] = None
        return d


def _check_keys(d: dict, where: str):
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ContractError(f"unknown {where} key(s): {', '.join(unknown)}")


def resolve_config(variant, overrides: Optional[dict] = None, preset: str = "paper") -> TrainConfig:
    """Variant preset (``paper`` or ``desk``) with ``overrides`` applied on top."""
    overrides = dict(overrides or {})
    _check_keys(overrides, "config")
    if "variant" in overrides and Variant(overrides["variant"]) is not Variant(variant):
        raise ContractError(f"config variant {overrides['variant']!r} conflicts with --variant {variant!r}")
    variant = Variant(variant)
    if preset == "paper":
        values = {**PAPER_COMMON, **PAPER_PRESETS[variant]}
    elif preset == "desk":
        values = {**PAPER_COMMON, **PAPER_PRESETS[variant], **DESK_COMMON}
    else:
        raise ContractError(f"unknown preset {preset!r}")
    preset_augment = values.get("augment", {})
    values.update(overrides)
    if isinstance(overrides.get("augment"), dict):
        values["augment"] = {**preset_augment, **overrides["augment"]}
    values["variant"] = variant
    return TrainConfig(**values)


def load_json(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ContractError(f"{path}: expected a JSON object at top level")
    return d
