"""Pretrain every variant on small synthetic volumes and probe it against its random init.

    python3 scripts/desk_efficacy.py --seeds 0 1 2 --out results/efficacy.csv
"""

import argparse
import csv
import json
from pathlib import Path

from volcon.experiments import VARIANTS, desk_efficacy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--overrides", type=json.loads, default=None, help="JSON config overrides on the desk preset")
    ap.add_argument("--out", type=Path, default=Path("results/efficacy.csv"))
    args = ap.parse_args()

    rep = desk_efficacy(seeds=args.seeds, variants=args.variants, steps=args.steps,
                        overrides=args.overrides, log=print)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "first20_loss", "last20_loss", "loss_drop", "probe_accuracy",
                    "random_init_accuracy", "probe_gain", "same_scan_similarity_gap", "seconds"])
        for r in rep.runs:
            w.writerow([r.variant, r.seed, r.first_loss, r.last_loss, r.loss_drop, r.probe_accuracy,
                        r.random_init_accuracy, r.probe_gain, r.similarity_gap, round(r.seconds, 2)])
    print()
    for v in args.variants:
        print(f"{v:8s} min loss drop {100 * rep.min_drop(v):5.1f}%   mean probe gain {100 * rep.mean_gain(v):+5.1f} pt")
    print(f"total {rep.seconds / 60:.1f} min; rows in {args.out}")


if __name__ == "__main__":
    main()
