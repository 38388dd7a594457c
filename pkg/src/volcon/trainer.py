"""Contrastive pretraining loop with Adam and cosine learning-rate decay."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import augment, sampling
from .config import TrainConfig
from .errors import ContractError, NumericError
from .model import ModelBundle, Variant, forward_loss, init_bundle
from .scan_store import ScanDataset
from .tensor_engine import ParamStore, backward

log = logging.getLogger(__name__)

HISTORY_FILE = "history.csv"
CHECKPOINT_FILE = "checkpoint.volp"
MANIFEST_FILE = "manifest.json"


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1 or not (0 <= step <= total_steps):
        raise ContractError(f"need 0 <= step <= total_steps and total_steps >= 1, got {step}/{total_steps}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamStore, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update, with ``weight_decay * theta`` added to the gradient."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def train_step(bundle: ModelBundle, state: AdamState, x1, x2, lr: float, weight_decay: float):
    """Loss, backward and update on one prepared batch; returns (loss, grads)."""
    bundle.params.zero_grad()
    loss = forward_loss(bundle, x1, x2)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}", step=state.t)
    backward(loss)
    grads = bundle.params.grads()
    adam_step(bundle.params, grads, state, lr, weight_decay=weight_decay)
    return value, grads


def assemble_batch(dataset: ScanDataset, config: TrainConfig, step: int):
    """The step's two view batches; a pure function of (dataset, config, step).

    Pair variants yield (B, D, D, C) arrays, the set variant (B, K, D, D, C).
    """
    rng = np.random.default_rng([int(config.seed), int(step), 0xBA7C])
    spec = config.augment
    window = config.window_params()
    v1, v2 = [], []
    for _ in range(config.batch_size):
        if config.variant is Variant.DEEP_SET:
            i = sampling.sample_scan_index(dataset, rng)
            sample = sampling.sample_ds_views(dataset, i, window, rng)
            slices = dataset[i].slices
            a, _ = augment.apply_set(spec, [slices[j] for j in sample.set_a], rng)
            b, _ = augment.apply_set(spec, [slices[j] for j in sample.set_b], rng)
            v1.append(np.stack(a))
            v2.append(np.stack(b))
            continue
        if config.variant is Variant.PER_SCAN:
            i = sampling.sample_scan_index(dataset, rng)
            pair = sampling.sample_ps_pair(dataset, i, window, rng)
        else:
            pair = sampling.sample_baseline(dataset, rng)
        for ref, out in ((pair.first, v1), (pair.second, v2)):
            src = dataset.get_slice(ref)
            out.append(augment.apply(augment.draw_params(spec, src.shape[:2], rng), src))
    return np.stack(v1), np.stack(v2)


@dataclass
class RunRecord:
    losses: list
    lrs: list
    steps_per_epoch: int
    config: dict
    wall_seconds: float
    checkpoint_path: Optional[str] = None
    bundle: Optional[ModelBundle] = field(default=None, repr=False)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def history_rows(self):
        for step, (lr, loss) in enumerate(zip(self.lrs, self.losses)):
            yield step, step // self.steps_per_epoch, lr, loss


def write_history(record: RunRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "lr", "loss"])
        for step, epoch, lr, loss in record.history_rows():
            w.writerow([step, epoch, repr(lr), repr(loss)])


def pretrain(dataset: ScanDataset, config: TrainConfig, log_every: int = 0) -> RunRecord:
    """Train the configured variant from scratch; deterministic given config.seed."""
    if len(dataset) < 1:
        raise ContractError("dataset is empty")
    in_channels = dataset[0].slice_shape[2]
    bundle = init_bundle(config.model_config(in_channels), config.seed)
    spe = config.resolved_steps_per_epoch(dataset.flat_size)
    total = config.epochs * spe
    state = AdamState()
    losses, lrs = [], []
    t0 = time.perf_counter()
    for step in range(total):
        lr = cosine_lr(step, total, config.lr0)
        x1, x2 = assemble_batch(dataset, config, step)
        try:
            loss, _ = train_step(bundle, state, x1, x2, lr, config.weight_decay)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}", step=step) from exc
        losses.append(loss)
        lrs.append(lr)
        if log_every and step % log_every == 0:
            log.info("step %d/%d lr %.3g loss %.4f", step, total, lr, loss)
    record = RunRecord(losses, lrs, spe, config.manifest(), time.perf_counter() - t0, bundle=bundle)
    if config.output_dir is not None:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / CHECKPOINT_FILE
        bundle.params.save(ckpt)
        write_history(record, out / HISTORY_FILE)
        write_manifest(config, out / MANIFEST_FILE, in_channels=in_channels, steps_per_epoch=spe,
                       wall_seconds=record.wall_seconds)
        record.checkpoint_path = str(ckpt)
    return record


def write_manifest(config: TrainConfig, path, in_channels: int = 1, steps_per_epoch=None,
                   wall_seconds=None) -> None:
    doc = {
        "config": config.manifest(),
        "model": config.model_config(in_channels).to_dict(),
        "steps_per_epoch": steps_per_epoch,
        "wall_seconds": wall_seconds,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_run(run_dir) -> ModelBundle:
    """Bundle from a run directory written by ``pretrain`` (or from a checkpoint path)."""
    from .model import ModelConfig

    run_dir = Path(run_dir)
    ckpt = run_dir / CHECKPOINT_FILE if run_dir.is_dir() else run_dir
    manifest = json.loads((ckpt.parent / MANIFEST_FILE).read_text())
    return ModelBundle.load(ckpt, ModelConfig(**manifest["model"]))
