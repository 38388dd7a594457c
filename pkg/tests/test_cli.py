import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from volcon.cli import main
from volcon.scan_store import load_dataset

TINY = {"steps_per_epoch": 3, "image_size": 16, "channels": [4, 4], "feature_dim": 8, "proj_dim": 8,
        "batch_size": 4}


@pytest.fixture
def volc(tmp_path):
    path = tmp_path / "d.volc"
    assert main(["gen-data", "--scans", "10", "--slices", "16", "--height", "32", "--width", "32",
                 "--channels", "1", "--classes", "2", "--seed", "7", "--out", str(path)]) == 0
    return path


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def test_gen_data_loadable_and_deterministic(volc, tmp_path):
    assert len(load_dataset(volc)) == 10
    again = tmp_path / "e.volc"
    main(["gen-data", "--scans", "10", "--slices", "16", "--height", "32", "--width", "32",
          "--channels", "1", "--classes", "2", "--seed", "7", "--out", str(again)])
    assert again.read_bytes() == volc.read_bytes()


def test_gen_data_rejects_zero_scans(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen-data", "--scans", "0", "--slices", "4", "--out", str(tmp_path / "x.volc")])
    assert info.value.code == 2
    assert "--scans" in capsys.readouterr().err


@pytest.mark.parametrize("variant, expect", [
    ("ds", {"omega": 0.5, "k_set": 3, "t_threshold": None, "image_size": 128}),
    ("ps", {"omega": 0.1, "t_threshold": 5, "image_size": 224}),
])
def test_pretrain_manifest_shows_presets(variant, expect, volc, tmp_path):
    out = tmp_path / variant
    assert main(["pretrain", "--data", str(volc), "--variant", variant, "--out-dir", str(out), "--dry-run"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())["config"]
    for key, value in expect.items():
        assert manifest[key] == value


def test_pretrain_rerun_gives_identical_history(volc, tmp_path):
    cfg = write_json(tmp_path / "c.json", TINY)
    for name in ("a", "b"):
        assert main(["pretrain", "--config", cfg, "--data", str(volc), "--variant", "ds",
                     "--preset", "desk", "--out-dir", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a/history.csv")))
    assert [r["step"] for r in rows] == ["0", "1", "2"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretrain_non_finite_exits_3(volc, tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {**TINY, "lr0": 1e300})
    code = main(["pretrain", "--config", cfg, "--data", str(volc), "--variant", "baseline",
                 "--preset", "desk", "--out-dir", str(tmp_path / "o")])
    assert code == 3
    assert "step" in capsys.readouterr().err


def test_pretrain_bad_config_exits_2(volc, tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"omega_typo": 0.2})
    assert main(["pretrain", "--config", cfg, "--data", str(volc), "--variant", "ds",
                 "--out-dir", str(tmp_path / "o")]) == 2
    assert "omega_typo" in capsys.readouterr().err


def test_missing_data_exits_4(tmp_path):
    assert main(["pretrain", "--data", str(tmp_path / "none.volc"), "--variant", "ds",
                 "--out-dir", str(tmp_path / "o"), "--dry-run"]) == 4


def test_probe_pretrained_and_random_init(volc, tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", TINY)
    for name, extra in (("run", []), ("init", ["--init-only"])):
        assert main(["pretrain", "--config", cfg, "--data", str(volc), "--variant", "ds", "--preset", "desk",
                     "--out-dir", str(tmp_path / name)] + extra) == 0
    accs = []
    for name in ("run", "init"):
        out = tmp_path / f"{name}.csv"
        assert main(["probe", "--checkpoint", str(tmp_path / name), "--train-data", str(volc),
                     "--test-data", str(volc), "--out", str(out), "--iters", "200"]) == 0
        (row,) = list(csv.DictReader(open(out)))
        accs.append(float(row["probe_accuracy"]))
    assert all(0.0 <= a <= 1.0 for a in accs)
    assert "probe accuracy" in capsys.readouterr().out


def test_probe_missing_checkpoint_exits_2(volc, tmp_path):
    assert main(["probe", "--checkpoint", str(tmp_path / "nope"), "--train-data", str(volc),
                 "--test-data", str(volc), "--out", str(tmp_path / "p.csv")]) == 2


def sweep_spec(tmp_path, volc, **kw):
    spec = {"base": TINY, "deltas": [{"k_set": 1}, {"k_set": 3}, {"k_set": 5}], "seeds": [0, 1],
            "data": {"train": str(volc), "test": str(volc)}, "probe": {"iters": 100}}
    spec.update(kw)
    return write_json(tmp_path / "spec.json", spec)


def test_sweep_writes_six_rows(volc, tmp_path, monkeypatch):
    monkeypatch.setenv("VOLCON_THREADS", "1")
    assert main(["sweep", "--spec", sweep_spec(tmp_path, volc), "--out-dir", str(tmp_path / "sw")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sw/results.csv")))
    assert len(rows) == 6 and {r["K"] for r in rows} == {"1", "3", "5"}
    assert len(list(csv.DictReader(open(tmp_path / "sw/summary.csv")))) == 3


def test_sweep_unknown_key_exits_2(volc, tmp_path, capsys):
    spec = sweep_spec(tmp_path, volc, deltas=[{"omega_typo": 0.3}])
    assert main(["sweep", "--spec", spec, "--out-dir", str(tmp_path / "sw")]) == 2
    assert "omega_typo" in capsys.readouterr().err


def test_selfcheck_passes_via_module_entry():
    proc = subprocess.run([sys.executable, "-m", "volcon", "selfcheck"], capture_output=True, text=True,
                          timeout=600)
    lines = [l for l in proc.stdout.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert len(lines) >= 5 and all(l.startswith("PASS") for l in lines)


def test_help_documents_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["pretrain", "--help"])
    text = capsys.readouterr().out
    for token in ("lr0 0.07", "omega 0.1", "k_set 3", "image_size 128", "crop_scale_range"):
        assert token in text
