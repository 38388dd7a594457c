"""Command-line interface for contrastive pretraining on slice stacks.

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import checks
from .config import load_json, resolve_config
from .errors import ContractError, FormatError, NumericError, PersistenceError
from .evaluation import (
    SweepSpec, extract_features, linear_probe, run_sweep, write_results, write_summary,
)
from .model import init_bundle
from .scan_store import generate_synthetic_dataset, load_dataset, save_dataset
from .trainer import CHECKPOINT_FILE, MANIFEST_FILE, load_run, pretrain, write_manifest

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volcon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic labeled VOLC dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    g.add_argument("--scans", type=_positive_int, required=True, help="number of scans N")
    g.add_argument("--slices", type=_positive_int, required=True, help="slices per scan L")
    g.add_argument("--height", type=_positive_int, default=32)
    g.add_argument("--width", type=_positive_int, default=32)
    g.add_argument("--channels", type=_positive_int, default=1)
    g.add_argument("--classes", type=_positive_int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output .volc path")

    p = sub.add_parser(
        "pretrain", help="contrastive pretraining of one variant",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=(
            "Config keys (JSON object, snake_case) override the preset:\n"
            "  epochs, steps_per_epoch (default ceil(total slices / batch_size)), batch_size,\n"
            "  lr0, weight_decay, temperature (0.5), image_size, omega, t_threshold, k_set,\n"
            "  ds_head (identity|mlp), feature_dim (64), proj_dim (32), channels, seed (0),\n"
            "  augment {crop_scale_range [0.2,1.0], hflip_prob 0.5, blur_prob 0.5,\n"
            "           blur_sigma_range [0.1,2.0], jitter_strength 0.4, *_enabled,\n"
            "           share_full_transform true}\n"
            "paper preset: epochs 100, batch_size 32, lr0 0.07, weight_decay 1e-10;\n"
            "  baseline image_size 224; ps omega 0.1, t_threshold 5, image_size 224;\n"
            "  ds omega 0.5, k_set 3, image_size 128.\n"
            "desk preset: paper values, then 1 epoch x 500 steps, batch_size 8, lr0 1e-3,\n"
            "  image_size 32, temperature 0.2, crop_scale_range [0.5, 1.0]."
        ),
    )
    p.add_argument("--config", help="JSON file of config overrides")
    p.add_argument("--data", required=True, help="VOLC dataset")
    p.add_argument("--variant", choices=["baseline", "ps", "ds"], required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--preset", choices=["paper", "desk"], default="paper")
    p.add_argument("--dry-run", action="store_true", help="resolve the config and write the manifest only")
    p.add_argument("--init-only", action="store_true",
                   help="write the random-init checkpoint and manifest without training (probe baseline)")

    pr = sub.add_parser("probe", help="linear probe on frozen encoder features",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    pr.add_argument("--checkpoint", required=True, help="run directory or checkpoint.volp beside its manifest")
    pr.add_argument("--train-data", required=True)
    pr.add_argument("--test-data", required=True)
    pr.add_argument("--out", required=True, help="one-line result CSV")
    pr.add_argument("--l2-reg", type=float, default=1e-4)
    pr.add_argument("--iters", type=_positive_int, default=5000)

    s = sub.add_parser("sweep", help="pretrain + probe over a settings grid")
    s.add_argument("--spec", required=True, help="JSON sweep spec")
    s.add_argument("--out-dir", required=True)

    sub.add_parser("selfcheck", help="run gradient, oracle and invariance checks")
    return parser


def cmd_gen_data(args) -> int:
    data = generate_synthetic_dataset(args.scans, args.slices, args.height, args.width, args.channels,
                                      args.classes, args.seed)
    save_dataset(data, args.out)
    print(f"wrote {len(data)} scans ({data.flat_size} slices) to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    overrides = load_json(args.config) if args.config else {}
    config = resolve_config(args.variant, overrides, preset=args.preset)
    config = dataclasses.replace(config, output_dir=args.out_dir)
    data = load_dataset(args.data)
    if args.dry_run:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(config, out / MANIFEST_FILE, in_channels=data[0].slice_shape[2],
                       steps_per_epoch=config.resolved_steps_per_epoch(data.flat_size))
        print(json.dumps(config.manifest(), indent=2))
        return EXIT_OK
    if args.init_only:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        in_channels = data[0].slice_shape[2]
        init_bundle(config.model_config(in_channels), config.seed).params.save(out / CHECKPOINT_FILE)
        write_manifest(config, out / MANIFEST_FILE, in_channels=in_channels,
                       steps_per_epoch=config.resolved_steps_per_epoch(data.flat_size))
        print(f"random-init checkpoint in {args.out_dir}")
        return EXIT_OK
    record = pretrain(data, config, log_every=50)
    print(f"final loss {record.final_loss:.6f}; artifacts in {args.out_dir}")
    return EXIT_OK


def cmd_probe(args) -> int:
    ckpt = Path(args.checkpoint)
    ckpt_file = ckpt / CHECKPOINT_FILE if ckpt.is_dir() else ckpt
    if not ckpt_file.is_file() or not (ckpt_file.parent / MANIFEST_FILE).is_file():
        raise UsageError(f"--checkpoint: no checkpoint with manifest at {args.checkpoint}")
    bundle = load_run(ckpt)
    train, test = load_dataset(args.train_data), load_dataset(args.test_data)
    acc = linear_probe(extract_features(bundle, train, split="train"),
                       extract_features(bundle, test, split="test"), l2_reg=args.l2_reg, iters=args.iters)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "variant", "D", "probe_accuracy"])
        w.writerow([str(ckpt_file), bundle.config.variant.value, bundle.config.image_size, repr(acc)])
    print(f"probe accuracy {acc:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = SweepSpec.from_dict(load_json(args.spec))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(spec)
    write_results(rows, out / "results.csv")
    write_summary(rows, out / "summary.csv")
    failed = sum(r["error"] is not None for r in rows)
    print(f"{len(rows)} cells, {failed} failed; results in {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    return EXIT_OK if checks.run_all(sys.stdout) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "sweep": cmd_sweep,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FormatError, PersistenceError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ContractError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
