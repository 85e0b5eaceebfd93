"""Command-line interface.

Subcommands: gen, cluster, train, cam, refine, eval, ablate, sweep, probe,
export-masks. Intermediate subcommands run the deterministic pipeline prefix
they need and stop after their stage. Exit code is 0 on success; failures
print the failing stage on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import default_config, load_config, save_config
from .pipeline import (
    StageError,
    export_prompt_masks,
    run_ablation,
    run_pipeline,
    run_probe_to_csv,
    run_sweep,
)
from .synth import export_dataset, generate_dataset, split_dataset


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakcam", description=__doc__)
    parser.add_argument("--config", type=Path, default=None, help="JSON run config (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, default=None, help="override the top-level seed")
    parser.add_argument("--out", type=Path, default=None, help="override the output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers for ablate/sweep cells")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", help="generate, split and export the synthetic dataset")
    sub.add_parser("cluster", help="frozen features + per-class k-means sub-class labels")
    sub.add_parser("train", help="joint classifier training; writes checkpoint and log")
    sub.add_parser("cam", help="compute class activation maps for the eval split")
    sub.add_parser("refine", help="prompt-affinity random-walk refinement")
    sub.add_parser("eval", help="full pipeline through metrics.csv")

    ablate = sub.add_parser("ablate", help="{sub-class, refinement} x {on, off} grid")
    ablate.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (>= 3)")

    sweep = sub.add_parser("sweep", help="single-axis hyper-parameter sweep")
    sweep.add_argument("--axis", required=True, choices=["K", "beta", "t", "gamma", "theta"])
    sweep.add_argument("--values", required=True, help="comma-separated axis values")
    sweep.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed)")

    probe = sub.add_parser("probe", help="training-dynamics probe with a frozen sub-class head")
    probe.add_argument("--eval-interval", type=int, default=10)

    export = sub.add_parser("export-masks", help="write every grid-prompt mask to a PGM store")
    export.add_argument("--store", type=Path, default=None, help="store directory (default: <out>/mask_store)")
    return parser


def _resolve_config(args):
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = default_config(seed=args.seed if args.seed is not None else 0)
    if args.seed is not None and args.config is not None:
        # Reseed the whole run while keeping explicit structure choices.
        from .pipeline import _reseeded

        cfg = _reseeded(cfg, args.seed, cfg.out_dir)
    if args.out is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    return cfg


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v != ""]


def _parse_value_list(text: str) -> list[float]:
    out = []
    for v in text.split(","):
        if v == "":
            continue
        f = float(v)
        out.append(int(f) if f.is_integer() else f)
    return out


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        out = Path(cfg.out_dir)
        if args.command == "gen":
            out.mkdir(parents=True, exist_ok=True)
            save_config(cfg, out / "config.json")
            dataset = generate_dataset(cfg.synth)
            split_dataset(dataset, cfg.split_ratios, cfg.split_seed)
            manifest = export_dataset(dataset, out / "dataset")
            print(f"wrote {len(dataset)} samples; manifest at {manifest}")
        elif args.command in ("cluster", "train", "cam", "refine", "eval"):
            until = {"eval": "eval", "refine": "refine", "cam": "cam", "train": "train", "cluster": "cluster"}[args.command]
            result = run_pipeline(cfg, until=until)
            if result.summary:
                print(f"mean dice {result.summary['mean_dsc']:.4f} over {result.summary['n_rows']} rows")
            print(f"artifacts in {out}")
        elif args.command == "ablate":
            seeds = _parse_int_list(args.seeds)
            table = run_ablation(cfg, seeds, jobs=args.jobs)
            for cell in table["cells"]:
                print(f"{cell:>15}: dice {table['means'][cell]:.4f} +/- {table['sds'][cell]:.4f}")
        elif args.command == "sweep":
            seeds = _parse_int_list(args.seeds) if args.seeds else None
            table = run_sweep(cfg, args.axis, _parse_value_list(args.values), seeds=seeds, jobs=args.jobs)
            for value in table["values"]:
                print(f"{args.axis}={value}: dice {table['mean_dsc'][value]:.4f}")
        elif args.command == "probe":
            path = run_probe_to_csv(cfg, eval_interval=args.eval_interval)
            print(f"probe log at {path}")
        elif args.command == "export-masks":
            store = args.store if args.store is not None else out / "mask_store"
            manifest = export_prompt_masks(cfg, store)
            print(f"mask store manifest at {manifest}")
        return 0
    except StageError as err:
        print(f"error in stage {err.stage}: {err.cause}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
