"""Acceptance criteria, one test per criterion, each reporting a PASS/FAIL line."""

import csv
import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from volcon import checks, sampling
from volcon import model as M
from volcon.cli import main
from volcon.evaluation import run_sweep, summarise, write_results
from volcon.experiments import VARIANTS, ablation_grids, ablation_spec, desk_efficacy
from volcon.scan_store import Scan, ScanDataset, flatten


def stack(*lengths):
    return ScanDataset(tuple(Scan(f"s{i}", np.zeros((n, 1, 1, 1))) for i, n in enumerate(lengths)))


def test_criterion_1_gradient_oracle(report):
    t0 = time.perf_counter()
    errs = {}
    for variant, head in (("baseline", "identity"), ("ps", "identity"), ("ds", "identity"), ("ds", "mlp")):
        bundle, fn = checks.smooth_loss_case(variant, head, k=3, batch=4)
        assert bundle.config.image_size == 16 and bundle.config.feature_dim == 8
        errs[f"{variant}/{head}"] = checks.te.finite_diff_check(fn, bundle.params, 1e-6)
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-5 and secs < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert report(1, ok, f"max rel err {worst:.2e} <= 1e-5 ({detail}); {secs:.1f}s < 60s"), errs


def test_criterion_2_nt_xent_oracle(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        b, p = int(rng.integers(2, 9)), int(rng.integers(4, 33))
        z1, z2 = (checks._unit_rows(rng, b, p) for _ in range(2))
        tau = float(rng.uniform(0.05, 1.0))
        fast = M.nt_xent(checks.te.Tensor(z1), checks.te.Tensor(z2), tau).item()
        worst = max(worst, abs(fast - checks.brute_force_nt_xent(z1, z2, tau)))
    same = np.tile(checks._unit_rows(rng, 1, 7), (2, 1))
    ln3 = abs(M.nt_xent(checks.te.Tensor(same), checks.te.Tensor(same), 0.5).item() - math.log(3))
    ok = worst <= 1e-10 and ln3 <= 1e-12
    assert report(2, ok, f"100 batches max |fast-brute| {worst:.1e} <= 1e-10; |loss - ln3| {ln3:.1e} <= 1e-12")


def test_criterion_3_permutation_invariance(report):
    ok, detail = checks.check_permutation_invariance()
    assert report(3, ok, f"K=1..4, all permutations, identity+mlp heads: {detail} <= 1e-9")


def test_criterion_4_k1_equivalence(report):
    ok, detail = checks.check_k1_equivalence(steps=50)
    assert report(4, ok, f"50 Adam steps on injected batches: {detail} (tol 1e-12 / 1e-10)")


def test_criterion_5_sampler_statistics(report):
    rng = np.random.default_rng(55)
    # (a) baseline draws uniform over the flattened slices
    d = stack(3, 1, 5, 2)
    index = {ref: i for i, ref in enumerate(flatten(d))}
    counts = np.zeros(len(index))
    for _ in range(100_000):
        counts[index[sampling.sample_baseline(d, rng).first]] += 1
    p_flat = stats.chisquare(counts).pvalue
    # (b) window starts uniform over {0..L-w}
    starts = np.array([sampling.sample_window(100, 0.5, rng)[0] for _ in range(100_000)])
    p_start = stats.chisquare(np.bincount(starts, minlength=51)).pvalue
    # (c) per-scan pair distance strictly below the window width, 10^6 draws
    d = stack(100)
    params = sampling.WindowParams(omega=0.1, t_threshold=5)
    width = sampling.window_width(100, 0.1)
    violations = 0
    for _ in range(1_000_000):
        pair = sampling.sample_ps_pair(d, 0, params, rng)
        violations += abs(pair.first.slice_index - pair.second.slice_index) >= width
    ok = p_flat > 0.01 and p_start > 0.01 and starts.max() == 50 and violations == 0
    assert report(5, ok, f"chi2 p flatten {p_flat:.3f}, window start {p_start:.3f} (> 0.01); "
                         f"PS |delta| >= {width}: {violations} of 10^6")


def test_criterion_6_desk_efficacy(report):
    lines = []
    rep = desk_efficacy(seeds=(0, 1, 2), log=lines.append)
    print("\n".join(lines))
    parts, ok = [], rep.seconds < 15 * 60
    for v in VARIANTS:
        drop, gain = rep.min_drop(v), rep.mean_gain(v)
        ok &= drop >= 0.20 and gain >= 0.05
        parts.append(f"{v} min drop {100 * drop:.1f}% gain {100 * gain:+.1f}pt")
    assert report(6, ok, "; ".join(parts) + f" (need >=20%, >=+5pt); {rep.seconds / 60:.1f} min < 15")


def test_criterion_7_ablation_report(report, tmp_path):
    grids = ablation_grids()
    deltas = []
    for d in grids["set_size"] + grids["ps_width"] + grids["ds_width"]:
        # the K=3, omega=0.5 cell is shared by the set-size and set-width grids
        if d not in deltas and d != {"variant": "ds", "omega": 0.5}:
            deltas.append(d)
    rows = run_sweep(ablation_spec(deltas, seeds=(0,)))
    write_results(rows, tmp_path / "results.csv")
    header, body = summarise(rows)
    for line in [header] + body:
        print(" ".join(f"{v:.3f}" if isinstance(v, float) else str(v) for v in line))
    cell = lambda r: f"{r['probe_accuracy']:.3f}" if r["probe_accuracy"] is not None else "error"
    k_rows = [r for r in rows if r["variant"] == "ds" and r["omega"] == 0.5]
    ps_rows = [r for r in rows if r["variant"] == "ps"]
    w_rows = [r for r in rows if r["variant"] == "ds" and r["K"] == 3]
    shape_ok = (len(rows) == len(body) == 8 and not any(r["error"] for r in rows)
                and sorted(r["K"] for r in k_rows) == [1, 3, 5]
                and sorted(r["omega"] for r in ps_rows) == [0.1, 0.4, 0.7]
                and sorted(r["omega"] for r in w_rows) == [0.2, 0.5, 0.8])
    _, k1_detail = checks.check_k1_equivalence(steps=50)
    fmt = lambda rs, key: ", ".join(f"{r[key]}: {cell(r)}" for r in sorted(rs, key=lambda r: r[key]))
    assert report(7, shape_ok, f"probe acc by K [{fmt(k_rows, 'K')}], ps omega [{fmt(ps_rows, 'omega')}], "
                               f"ds omega [{fmt(w_rows, 'omega')}]; K=1 strict harness: {k1_detail}")


def test_criterion_8_pretrain_determinism(report, tmp_path):
    data = tmp_path / "d.volc"
    main(["gen-data", "--scans", "8", "--slices", "12", "--height", "32", "--width", "32", "--out", str(data)])
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps_per_epoch": 25, "seed": 3}))
    same = {}
    for variant in VARIANTS:
        blobs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{variant}{rep}"
            assert main(["pretrain", "--config", str(cfg), "--data", str(data), "--variant", variant,
                         "--preset", "desk", "--out-dir", str(out)]) == 0
            blobs.append((out / "history.csv").read_bytes())
        same[variant] = blobs[0] == blobs[1] and len(list(csv.reader(blobs[0].decode().splitlines()))) == 26
    ok = all(same.values())
    assert report(8, ok, "history CSV bitwise identical on rerun: " + ", ".join(f"{k} {v}" for k, v in same.items()))
