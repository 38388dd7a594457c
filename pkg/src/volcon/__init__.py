"""Contrastive pretraining on slice stacks: baseline, per-scan and deep-set SimCLR variants."""

from .augment import AugmentSpec
from .config import TrainConfig, resolve_config
from .evaluation import SweepSpec, extract_features, linear_probe, run_sweep
from .model import DsHead, ModelBundle, ModelConfig, Variant, init_bundle
from .scan_store import Scan, ScanDataset, generate_synthetic_dataset, load_dataset, save_dataset
from .trainer import pretrain

__all__ = [
    "AugmentSpec", "DsHead", "ModelBundle", "ModelConfig", "Scan", "ScanDataset", "SweepSpec",
    "TrainConfig", "Variant", "extract_features", "generate_synthetic_dataset", "init_bundle",
    "linear_probe", "load_dataset", "pretrain", "resolve_config", "run_sweep", "save_dataset",
]
