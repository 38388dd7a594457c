"""Sweep the set-size, sampling-width, threshold and set-head grids on synthetic data.

Writes one results/summary CSV pair per grid. Cells run in parallel up to
VOLCON_THREADS workers.

    python3 scripts/ablation_tables.py --grids set_size ds_width --seeds 0 1 2
"""

import argparse
from pathlib import Path

from volcon.evaluation import run_sweep, summarise, write_results, write_summary
from volcon.experiments import ablation_grids, ablation_spec


def main():
    grids = ablation_grids()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grids", nargs="+", choices=sorted(grids), default=sorted(grids))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--out-dir", type=Path, default=Path("results/ablations"))
    args = ap.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name in args.grids:
        rows = run_sweep(ablation_spec(grids[name], seeds=args.seeds, steps=args.steps))
        write_results(rows, args.out_dir / f"{name}_results.csv")
        write_summary(rows, args.out_dir / f"{name}_summary.csv")
        header, body = summarise(rows)
        print(f"== {name}")
        print("  ".join(header))
        for line in body:
            print("  ".join(f"{v:.3f}" if isinstance(v, float) else str(v) for v in line))
        failed = [r for r in rows if r["error"]]
        if failed:
            print(f"{len(failed)} cell(s) failed; see the error column")


if __name__ == "__main__":
    main()
