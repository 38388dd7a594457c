"""Oracle-backed self checks, shared by the ``selfcheck`` command.

Each check returns ``(passed, detail)``.
"""

from __future__ import annotations

import io
import itertools
import math
import tempfile
from pathlib import Path

import numpy as np

from . import model as M
from . import sampling
from . import tensor_engine as te
from .scan_store import generate_synthetic_dataset, load_dataset, save_dataset
from .trainer import AdamState, train_step

GRAD_TOL = 1e-5
KINK_MARGIN = 1e-5


def tiny_config(variant="baseline", ds_head="identity") -> M.ModelConfig:
    return M.ModelConfig(variant=variant, image_size=16, in_channels=1, channels=(4, 4, 4, 4),
                         feature_dim=8, proj_dim=8, ds_head=ds_head)


def smooth_loss_case(variant="baseline", ds_head="identity", k=3, batch=4, max_tries=200, seed=0):
    """A (bundle, loss_fn) pair whose forward sits at least KINK_MARGIN from every ReLU kink.

    Inputs are redrawn until the margin holds, so central differences with
    eps = 1e-6 never straddle a kink.
    """
    cfg = tiny_config(variant, ds_head)
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, attempt])
        bundle = M.init_bundle(cfg, seed + attempt)
        shape = (batch, k, 16, 16, 1) if variant == "ds" else (batch, 16, 16, 1)
        x1, x2 = rng.uniform(size=shape), rng.uniform(size=shape)
        loss_fn = {
            "baseline": M.forward_loss_baseline,
            "ps": M.forward_loss_ps,
            "ds": M.forward_loss_ds,
        }[variant]
        fn = lambda p, x1=x1, x2=x2: loss_fn(M.ModelBundle(cfg, p), x1, x2)
        if te.kink_margin(fn, bundle.params) > KINK_MARGIN:
            return bundle, fn
    raise RuntimeError("no kink-free input found")


def brute_force_nt_xent(z1: np.ndarray, z2: np.ndarray, temperature: float) -> float:
    """Loop-based NT-Xent used as an independent reference."""
    z = [list(map(float, r)) for r in np.concatenate([z1, z2])]
    n = len(z)
    b = n // 2
    total = 0.0
    for i in range(n):
        pos = i + b if i < b else i - b
        sims = [sum(a * c for a, c in zip(z[i], z[j])) / temperature for j in range(n) if j != i]
        top = max(sims)
        log_den = top + math.log(sum(math.exp(s - top) for s in sims))
        pos_sim = sum(a * c for a, c in zip(z[i], z[pos])) / temperature
        total += log_den - pos_sim
    return total / n


def _unit_rows(rng, b, p):
    z = rng.normal(size=(b, p))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def check_gradients(variant, ds_head="identity"):
    bundle, fn = smooth_loss_case(variant, ds_head)
    err = te.finite_diff_check(fn, bundle.params, 1e-6)
    return err <= GRAD_TOL, f"max rel err {err:.2e}"


def check_nt_xent_oracle(n_batches=100):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(n_batches):
        b, p = int(rng.integers(2, 9)), int(rng.integers(4, 33))
        z1, z2 = _unit_rows(rng, b, p), _unit_rows(rng, b, p)
        tau = float(rng.uniform(0.1, 1.0))
        fast = M.nt_xent(te.Tensor(z1), te.Tensor(z2), tau).item()
        worst = max(worst, abs(fast - brute_force_nt_xent(z1, z2, tau)))
    same = np.tile(_unit_rows(rng, 1, 6), (2, 1))
    ln3 = abs(M.nt_xent(te.Tensor(same), te.Tensor(same), 0.5).item() - math.log(3))
    return worst <= 1e-10 and ln3 <= 1e-12, f"max |fast - brute| {worst:.1e}, |ln3 case| {ln3:.1e}"


def check_permutation_invariance():
    worst = 0.0
    rng = np.random.default_rng(5)
    for head in ("identity", "mlp"):
        cfg = tiny_config("ds", head)
        bundle = M.init_bundle(cfg, 3)
        for k in range(1, 5):
            x1 = rng.uniform(size=(3, k, 16, 16, 1))
            x2 = rng.uniform(size=(3, k, 16, 16, 1))
            feats = rng.normal(size=(k, cfg.feature_dim))
            ref_h = M.deepset_aggregate(bundle, feats).data
            ref_loss = M.forward_loss_ds(bundle, x1, x2).item()
            for perm in itertools.permutations(range(k)):
                perm = list(perm)
                h = M.deepset_aggregate(bundle, feats[perm]).data
                loss = M.forward_loss_ds(bundle, x1[:, perm], x2[:, perm]).item()
                worst = max(worst, float(np.abs(h - ref_h).max()), abs(loss - ref_loss))
    return worst <= 1e-9, f"max deviation {worst:.1e}"


def check_k1_equivalence(steps=10):
    base = M.init_bundle(tiny_config("baseline"), 7)
    deep = M.init_bundle(tiny_config("ds", "identity"), 7)
    sb, sd = AdamState(), AdamState()
    rng = np.random.default_rng(8)
    worst_loss = worst_grad = 0.0
    for _ in range(steps):
        x1, x2 = rng.uniform(size=(2, 4, 16, 16, 1))
        lb, gb = train_step(base, sb, x1, x2, 1e-3, 1e-10)
        ld, gd = train_step(deep, sd, x1[:, None], x2[:, None], 1e-3, 1e-10)
        worst_loss = max(worst_loss, abs(lb - ld))
        worst_grad = max(worst_grad, max(float(np.abs(gb[k] - gd[k]).max()) for k in gb))
    return worst_loss <= 1e-12 and worst_grad <= 1e-10, f"loss gap {worst_loss:.1e}, grad gap {worst_grad:.1e}"


def check_sampler_bounds(n=2000):
    rng = np.random.default_rng(9)
    data = generate_synthetic_dataset(6, 1, 4, 4, 1, 2, seed=1)
    lengths = [int(x) for x in rng.integers(1, 40, size=6)]
    bad = 0
    for _ in range(n):
        length = lengths[int(rng.integers(6))]
        omega = float(rng.uniform(1e-3, 1.0))
        k = int(rng.integers(1, 9))
        start, end = sampling.sample_window(length, omega, rng)
        idx = sampling.equidistant_indices(sampling.Window(0, start, end), k)
        if not (0 <= start < end <= length) or any(not (start <= j < end) for j in idx):
            bad += 1
        if idx != sorted(idx):
            bad += 1
    ps = sampling.WindowParams(omega=0.1, t_threshold=5, k_set=3)
    long = generate_synthetic_dataset(1, 60, 4, 4, 1, 1, seed=2)
    width = sampling.window_width(60, 0.1)
    for _ in range(n):
        pair = sampling.sample_ps_pair(long, 0, ps, rng)
        if pair.first.scan_index != pair.second.scan_index:
            bad += 1
        if abs(pair.first.slice_index - pair.second.slice_index) >= width:
            bad += 1
    return bad == 0, f"{bad} violations"


def check_volc_roundtrip():
    data = generate_synthetic_dataset(3, 4, 5, 6, 2, 2, seed=4)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.volc"
        save_dataset(data, path)
        back = load_dataset(path)
    ok = back.scans == data.scans
    return ok, "bitwise equal" if ok else "mismatch"


CHECKS = [
    ("gradient: baseline loss", lambda: check_gradients("baseline")),
    ("gradient: per-scan loss", lambda: check_gradients("ps")),
    ("gradient: deep-set loss (K=3, identity)", lambda: check_gradients("ds", "identity")),
    ("gradient: deep-set loss (K=3, mlp)", lambda: check_gradients("ds", "mlp")),
    ("nt-xent vs brute force", check_nt_xent_oracle),
    ("set permutation invariance", check_permutation_invariance),
    ("K=1 identity head equals baseline", check_k1_equivalence),
    ("sampler bounds", check_sampler_bounds),
    ("VOLC round trip", check_volc_roundtrip),
]


def run_all(out=None) -> bool:
    out = out or io.StringIO()
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}", file=out, flush=True)
    return all_ok
