"""Frozen-feature linear probing and the hyperparameter sweep harness."""

from __future__ import annotations

import csv
import dataclasses
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import resize_bilinear
from .config import TrainConfig, resolve_config
from .errors import ContractError
from .model import ModelBundle, encode_batch
from .scan_store import ScanDataset, generate_synthetic_dataset, load_dataset


@dataclass
class FeatureTable:
    features: np.ndarray
    labels: np.ndarray
    scan_ids: list
    slice_indices: np.ndarray
    split: str = "train"

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def center_view(slice_: np.ndarray, d: int) -> np.ndarray:
    """Largest centred square, resized to d x d."""
    h, w = slice_.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return resize_bilinear(np.asarray(slice_, dtype=np.float64)[top:top + s, left:left + s], d, d)


def extract_features(bundle: ModelBundle, dataset: ScanDataset, d: Optional[int] = None,
                     split: str = "train", chunk: int = 256) -> FeatureTable:
    """Encoder output h for every slice; no projection or set head is applied."""
    if not dataset.labeled:
        raise ContractError("feature extraction for probing needs a labeled dataset")
    d = bundle.config.image_size if d is None else int(d)
    views, labels, ids, idx = [], [], [], []
    for scan in dataset.scans:
        for j in range(scan.n_slices):
            views.append(center_view(scan.slices[j], d))
            labels.append(scan.label)
            ids.append(scan.id)
            idx.append(j)
    views = np.stack(views)
    feats = np.concatenate([encode_batch(bundle, views[i:i + chunk]).data
                            for i in range(0, len(views), chunk)])
    return FeatureTable(feats, np.asarray(labels, dtype=np.int64), ids, np.asarray(idx), split)


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(x: np.ndarray, y: np.ndarray, n_classes: int, l2_reg: float = 1e-4,
                 iters: int = 5000, tol: float = 1e-6):
    """Multinomial logistic regression by full-batch gradient descent.

    ``x`` should already carry a bias column. Step size is 0.5 / L with L the
    Lipschitz bound sigma_max(x)^2 / (2n) + l2_reg. Returns (weights, iterations).
    """
    n, f = x.shape
    onehot = np.eye(n_classes)[y]
    lip = np.linalg.norm(x, 2) ** 2 / (2.0 * n) + l2_reg
    step = 0.5 / lip
    w = np.zeros((f, n_classes))
    for it in range(1, iters + 1):
        grad = x.T @ (_softmax(x @ w) - onehot) / n + l2_reg * w
        if np.linalg.norm(grad) < tol:
            return w, it
        w -= step * grad
    return w, iters


def _standardise(train: np.ndarray, test: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    bias = lambda a: np.hstack([(a - mu) / sd, np.ones((len(a), 1))])
    return bias(train), bias(test)


def linear_probe(table_train: FeatureTable, table_test: FeatureTable, l2_reg: float = 1e-4,
                 iters: int = 5000) -> float:
    """Top-1 test accuracy of a linear classifier fit on frozen train features."""
    if len(table_train) == 0 or len(table_test) == 0:
        raise ContractError("both probe splits must be nonempty")
    if table_train.dim != table_test.dim:
        raise ContractError(f"feature dims differ: {table_train.dim} vs {table_test.dim}")
    classes = np.unique(table_train.labels)
    if len(classes) < 2:
        raise ContractError("probe train split holds a single class")
    n_classes = int(max(table_train.labels.max(), table_test.labels.max())) + 1
    xtr, xte = _standardise(table_train.features, table_test.features)
    w, _ = fit_logistic(xtr, table_train.labels, n_classes, l2_reg, iters)
    pred = np.argmax(xte @ w, axis=1)
    return float(np.mean(pred == table_test.labels))


def same_scan_similarity_gap(table: FeatureTable) -> float:
    """Mean cosine similarity within scans minus mean similarity across scans."""
    f = table.features / np.maximum(np.linalg.norm(table.features, axis=1, keepdims=True), 1e-12)
    sims = f @ f.T
    ids = np.asarray(table.scan_ids)
    same = ids[:, None] == ids[None, :]
    off_diag = ~np.eye(len(ids), dtype=bool)
    return float(sims[same & off_diag].mean() - sims[~same].mean())


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

RESULT_COLUMNS = ["variant", "K", "omega", "T", "ds_head", "D", "seed", "probe_accuracy",
                  "final_pretrain_loss", "wall_seconds", "error"]

SWEEP_KEYS = {"base", "deltas", "seeds", "preset", "data", "probe"}
DATA_KEYS = {"train", "test"}
OPTIONAL_DATA_KEYS = {"probe_train"}
GEN_KEYS = {"n_scans", "slices_per_scan", "h", "w", "c", "n_classes", "seed"}
PROBE_KEYS = {"l2_reg", "iters"}


@dataclass(frozen=True)
class SweepSpec:
    """Settings grid: ``base`` overrides, one run per delta and seed.

    ``data.train`` / ``data.test`` are either VOLC paths or synthetic
    generator arguments. The train split feeds pretraining, and also the
    probe fit unless ``data.probe_train`` names a separate split.
    """

    deltas: tuple
    base: dict = field(default_factory=dict)
    seeds: tuple = (0,)
    preset: str = "desk"
    data: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(dict(d) for d in self.deltas))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.deltas:
            raise ContractError("sweep needs at least one delta")
        if not self.seeds:
            raise ContractError("sweep needs at least one seed")
        for d in self.deltas:
            self.config_for(d, self.seeds[0])
        if set(self.data) - DATA_KEYS - OPTIONAL_DATA_KEYS or not DATA_KEYS <= set(self.data):
            raise ContractError(f"sweep data must name {sorted(DATA_KEYS)} and optionally "
                                f"{sorted(OPTIONAL_DATA_KEYS)}")
        for split, src in self.data.items():
            if isinstance(src, dict) and set(src) - GEN_KEYS:
                raise ContractError(f"unknown data.{split} key(s): {', '.join(sorted(set(src) - GEN_KEYS))}")
        if set(self.probe) - PROBE_KEYS:
            raise ContractError(f"unknown probe key(s): {', '.join(sorted(set(self.probe) - PROBE_KEYS))}")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        unknown = sorted(set(d) - SWEEP_KEYS)
        if unknown:
            raise ContractError(f"unknown sweep key(s): {', '.join(unknown)}")
        if "deltas" not in d:
            raise ContractError("sweep spec is missing 'deltas'")
        return cls(**d)

    def config_for(self, delta: dict, seed: int) -> TrainConfig:
        merged = {**self.base, **delta, "seed": seed}
        variant = merged.pop("variant", "ds")
        return resolve_config(variant, merged, preset=self.preset)


def _load_split(src) -> ScanDataset:
    if isinstance(src, dict):
        return generate_synthetic_dataset(**src)
    return load_dataset(src)


def _run_cell(args):
    from .trainer import pretrain

    spec, delta, seed = args
    cfg = spec.config_for(delta, seed)
    row = {
        "variant": cfg.variant.value, "K": cfg.k_set, "omega": cfg.omega, "T": cfg.t_threshold,
        "ds_head": cfg.ds_head.value if cfg.variant.value == "ds" else None,
        "D": cfg.image_size, "seed": seed, "probe_accuracy": None, "final_pretrain_loss": None,
        "wall_seconds": None, "error": None,
    }
    cfg_manifest = cfg.manifest()
    for key, col in (("k_set", "K"), ("omega", "omega"), ("t_threshold", "T")):
        row[col] = cfg_manifest[key]
    t0 = time.perf_counter()
    try:
        train, test = _load_split(spec.data["train"]), _load_split(spec.data["test"])
        fit = _load_split(spec.data["probe_train"]) if "probe_train" in spec.data else train
        record = pretrain(train, dataclasses.replace(cfg, output_dir=None))
        acc = linear_probe(extract_features(record.bundle, fit, split="train"),
                           extract_features(record.bundle, test, split="test"), **spec.probe)
        row["probe_accuracy"] = acc
        row["final_pretrain_loss"] = record.final_loss
    except Exception as exc:  # recorded per cell; the sweep carries on
        row["error"] = f"{type(exc).__name__}: {exc}"
        traceback.print_exc()
    row["wall_seconds"] = round(time.perf_counter() - t0, 3)
    return row


def sweep_threads() -> int:
    env = os.environ.get("VOLCON_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ContractError(f"VOLCON_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


def run_sweep(spec: SweepSpec, workers: Optional[int] = None) -> list:
    """One result row per (delta, seed), in spec order."""
    jobs = [(spec, delta, seed) for delta in spec.deltas for seed in spec.seeds]
    workers = min(sweep_threads() if workers is None else workers, len(jobs))
    if workers <= 1:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, jobs))


def _fmt(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def write_results(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])


def summarise(rows: list) -> tuple:
    """Pivot to one row per setting with a column per seed plus the seed mean."""
    setting_cols = ["variant", "K", "omega", "T", "ds_head", "D"]
    seeds = sorted({r["seed"] for r in rows})
    table = {}
    for r in rows:
        key = tuple(r[c] for c in setting_cols)
        table.setdefault(key, {})[r["seed"]] = r["probe_accuracy"]
    header = setting_cols + [f"seed_{s}" for s in seeds] + ["mean"]
    out = []
    for key, cells in table.items():
        vals = [cells.get(s) for s in seeds]
        ok = [v for v in vals if v is not None]
        out.append(list(key) + vals + [float(np.mean(ok)) if ok else None])
    return header, out


def write_summary(rows: list, path) -> None:
    header, body = summarise(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for line in body:
            w.writerow([_fmt(v) for v in line])
