"""Desk-scale experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import resolve_config
from .evaluation import SweepSpec, extract_features, linear_probe
from .model import init_bundle
from .scan_store import generate_synthetic_dataset
from .trainer import pretrain

VARIANTS = ("baseline", "ps", "ds")

# 40 scans x 16 slices for pretraining; the probe gets its own larger labeled
# splits so that its own variance does not swamp the comparison.
PRETRAIN_DATA = dict(n_scans=40, slices_per_scan=16, h=32, w=32, c=1, n_classes=2)
PROBE_DATA = dict(n_scans=100, slices_per_scan=16, h=32, w=32, c=1, n_classes=2)


def data_seeds(seed: int) -> dict:
    return {"pretrain": 100 + seed, "probe_train": 300 + seed, "probe_test": 400 + seed}


@dataclass
class EfficacyRun:
    variant: str
    seed: int
    first_loss: float
    last_loss: float
    probe_accuracy: float
    random_init_accuracy: float
    similarity_gap: float
    seconds: float

    @property
    def loss_drop(self) -> float:
        return 1.0 - self.last_loss / self.first_loss

    @property
    def probe_gain(self) -> float:
        return self.probe_accuracy - self.random_init_accuracy


@dataclass
class EfficacyReport:
    runs: list = field(default_factory=list)
    seconds: float = 0.0

    def by_variant(self, variant: str) -> list:
        return [r for r in self.runs if r.variant == variant]

    def mean_gain(self, variant: str) -> float:
        return float(np.mean([r.probe_gain for r in self.by_variant(variant)]))

    def min_drop(self, variant: str) -> float:
        return float(min(r.loss_drop for r in self.by_variant(variant)))


def desk_efficacy(seeds=(0, 1, 2), variants=VARIANTS, steps: int = 500, window: int = 20,
                  overrides=None, log=None) -> EfficacyReport:
    """Pretrain each variant per seed, then probe it against its random init."""
    from .evaluation import same_scan_similarity_gap

    report = EfficacyReport()
    t_all = time.perf_counter()
    for seed in seeds:
        ds = data_seeds(seed)
        train = generate_synthetic_dataset(**PRETRAIN_DATA, seed=ds["pretrain"])
        probe_train = generate_synthetic_dataset(**PROBE_DATA, seed=ds["probe_train"])
        probe_test = generate_synthetic_dataset(**PROBE_DATA, seed=ds["probe_test"])
        for variant in variants:
            t0 = time.perf_counter()
            cfg = resolve_config(variant, {"steps_per_epoch": steps, "seed": seed, **(overrides or {})},
                                 preset="desk")
            record = pretrain(train, cfg)
            losses = np.asarray(record.losses)
            rand = init_bundle(cfg.model_config(1), seed)
            feats = {}
            for tag, bundle in (("trained", record.bundle), ("random", rand)):
                feats[tag] = (extract_features(bundle, probe_train, split="train"),
                              extract_features(bundle, probe_test, split="test"))
            run = EfficacyRun(
                variant, seed, float(losses[:window].mean()), float(losses[-window:].mean()),
                linear_probe(*feats["trained"]), linear_probe(*feats["random"]),
                same_scan_similarity_gap(feats["trained"][1]), time.perf_counter() - t0,
            )
            report.runs.append(run)
            if log:
                log(f"seed {seed} {variant:8s} loss {run.first_loss:.3f} -> {run.last_loss:.3f} "
                    f"({100 * run.loss_drop:.1f}% drop)  probe {run.probe_accuracy:.3f} "
                    f"vs random {run.random_init_accuracy:.3f}  [{run.seconds:.0f}s]")
    report.seconds = time.perf_counter() - t_all
    return report


def ablation_grids() -> dict:
    """Settings grids mirroring the set-size, width and threshold ablations."""
    return {
        "set_size": [{"variant": "ds", "k_set": k} for k in (1, 3, 5)],
        "ps_width": [{"variant": "ps", "omega": w} for w in (0.1, 0.4, 0.7)],
        "ds_width": [{"variant": "ds", "omega": w} for w in (0.2, 0.5, 0.8)],
        "threshold": [{"variant": "ps", "t_threshold": t} for t in (5, 50)],
        "ds_head": [{"variant": "ds", "ds_head": h} for h in ("identity", "mlp")],
    }


def ablation_spec(deltas, seeds=(0,), steps: int = 500) -> SweepSpec:
    data = {
        "train": {**PRETRAIN_DATA, "seed": 100},
        "probe_train": {**PROBE_DATA, "seed": 300},
        "test": {**PROBE_DATA, "seed": 400},
    }
    return SweepSpec(deltas=tuple(deltas), base={"steps_per_epoch": steps}, seeds=tuple(seeds),
                     preset="desk", data=data)
