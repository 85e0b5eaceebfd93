"""End-to-end pipeline, ablation grid, hyper-parameter sweeps.

A run executes: generate -> cluster -> train -> cam -> refine -> pseudo-label
-> eval, writing a resolved config snapshot first and one artifact per stage
into the run directory. Reruns from a snapshot reproduce every CSV byte for
byte. Stage failures abort with the stage name attached; artifacts written by
earlier stages are left in place.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig, config_to_dict, parse_config, save_config
from .formats import save_checkpoint, write_field, write_pgm
from .nn import NetConfig
from .prompts import grid_prompts, prompt_masks, synthetic_mask
from .refine import (
    aggregate_affinity,
    intensity_affinity_baseline,
    pairwise_affinity,
    pseudo_label,
    refine_cams,
    transition_matrix,
)
from .subclass import (
    build_subclass_labels,
    cluster_subclasses,
    compute_cams_batch,
    run_probe,
    train_classifier,
)
from .svg import line_chart
from .synth import generate_dataset, split_dataset

__all__ = [
    "StageError",
    "RunResult",
    "run_pipeline",
    "ABLATION_CELLS",
    "run_ablation",
    "SWEEP_AXES",
    "run_sweep",
    "export_prompt_masks",
    "run_probe_to_csv",
]

_STAGES = ("gen", "cluster", "train", "cam", "refine", "pseudo-label", "eval")

# Ablation grid in the classic presentation order: nothing, sub-classes only,
# refinement only, both.
ABLATION_CELLS = (
    ("baseline", False, False),
    ("subclass_only", True, False),
    ("refine_only", False, True),
    ("full", True, True),
)

SWEEP_AXES = ("K", "beta", "t", "gamma", "theta")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")


@dataclass
class RunResult:
    out_dir: Path
    summary: dict
    rows: list[metrics.SampleMetrics]


def _f(v: float) -> str:
    return f"{v:.6f}"


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _net_config(cfg: RunConfig) -> NetConfig:
    return NetConfig(
        image_size=cfg.synth.image_size,
        n_classes=cfg.synth.n_classes,
        k_subclasses=cfg.k_subclasses,
        channels=cfg.channels,
        strides=cfg.strides,
        init_seed=cfg.train.seed,
    )


def _sample_transition(sample, cfg: RunConfig, work_h: int, work_w: int):
    if cfg.refine.affinity_source == "intensity":
        affinity = intensity_affinity_baseline(
            sample.image, cfg.refine.radius, cfg.refine.intensity_bandwidth, work_h, work_w
        )
    else:
        prompts = grid_prompts(cfg.synth.image_size, cfg.refine.grid, sample_id=sample.id)
        masks = prompt_masks(sample, prompts, cfg.oracle)
        field = aggregate_affinity(masks, work_h, work_w)
        affinity = pairwise_affinity(field, cfg.refine.radius)
    return transition_matrix(affinity, cfg.refine.beta)


def run_pipeline(cfg: RunConfig, until: str = "eval") -> RunResult:
    """Run the pipeline up to and including the named stage (default: all)."""
    if until not in _STAGES:
        raise ValueError(f"unknown stage {until!r}; expected one of {_STAGES}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    result = RunResult(out_dir=out, summary={}, rows=[])

    def reached(stage: str) -> bool:
        return _STAGES.index(until) >= _STAGES.index(stage)

    stage = "gen"
    try:
        dataset = generate_dataset(cfg.synth)
        train_ds, val_ds, test_ds = split_dataset(dataset, cfg.split_ratios, cfg.split_seed)
        if not reached("cluster"):
            return result

        stage = "cluster"
        y_s = None
        if cfg.subclass_enabled:
            assignments = cluster_subclasses(
                train_ds.samples, cfg.synth.n_classes, cfg.k_subclasses,
                cfg.cluster_seed, cfg.feature_seed,
            )
            y_p_train = np.stack([s.y_p for s in train_ds.samples])
            y_s = build_subclass_labels(assignments, y_p_train, cfg.k_subclasses)
            _write_csv(
                out / "assignments.csv",
                ["sample_id", "class_id", "cluster_id"],
                [[train_ds.samples[i].id, c, cluster] for (i, c), cluster in sorted(assignments.items())],
            )
        if not reached("train"):
            return result

        stage = "train"
        net_cfg = _net_config(cfg)
        trained = train_classifier(
            net_cfg, cfg.train, train_ds.samples, y_s,
            val_samples=val_ds.samples, cam_threshold=cfg.refine.threshold,
        )
        save_checkpoint(out / "checkpoint.wck", trained.params)
        checkpoint_id = hashlib.sha256((out / "checkpoint.wck").read_bytes()).hexdigest()[:16]
        _write_csv(
            out / "train_log.csv",
            ["epoch", "loss_p", "loss_s", "val_cam_dice"],
            [[r.epoch, _f(r.loss_p), _f(r.loss_s), _f(r.val_cam_dice)] for r in trained.log],
        )
        if not reached("cam"):
            return result

        stage = "cam"
        eval_ds = {"train": train_ds, "val": val_ds, "test": test_ds}[cfg.eval_split]
        images = np.stack([np.asarray(s.image, dtype=np.float64) for s in eval_ds.samples])[:, None]
        raw_cams = compute_cams_batch(net_cfg, trained.params, images)
        if not reached("refine"):
            return result

        stage = "refine"
        work = net_cfg.feature_size
        refined = raw_cams
        if cfg.refine_enabled:
            refined = np.empty_like(raw_cams)
            refine_rows = []
            cam_dir = out / "cams"
            cam_dir.mkdir(exist_ok=True)
            for i, sample in enumerate(eval_ds.samples):
                transition = _sample_transition(sample, cfg, work, work)
                refined[i] = refine_cams(transition, raw_cams[i], cfg.refine.walk_steps)
                pre = pseudo_label(raw_cams[i], cfg.refine.threshold, sample.gt_mask.shape)
                post = pseudo_label(refined[i], cfg.refine.threshold, sample.gt_mask.shape)
                for c in range(cfg.synth.n_classes):
                    refine_rows.append([
                        sample.id, c + 1,
                        _f(metrics.dice(pre == c + 1, sample.gt_mask == c + 1)),
                        _f(metrics.dice(post == c + 1, sample.gt_mask == c + 1)),
                    ])
                for c in range(cfg.synth.n_classes):
                    write_field(cam_dir / f"{sample.id}_c{c + 1}.wcf", refined[i, c])
            _write_csv(out / "refine.csv", ["sample_id", "class", "pre_dice", "post_dice"], refine_rows)
        if not reached("pseudo-label"):
            return result

        stage = "pseudo-label"
        pseudo_dir = out / "pseudo"
        pseudo_dir.mkdir(exist_ok=True)
        labels = []
        for i, sample in enumerate(eval_ds.samples):
            lab = pseudo_label(refined[i], cfg.refine.threshold, sample.gt_mask.shape)
            labels.append(lab)
            write_pgm(pseudo_dir / f"{sample.id}.pgm", lab)
        if not reached("eval"):
            return result

        stage = "eval"
        rows: list[metrics.SampleMetrics] = []
        for sample, lab in zip(eval_ds.samples, labels):
            for c in range(cfg.synth.n_classes):
                rows.append(metrics.score_pair(sample.id, c + 1, lab == c + 1, sample.gt_mask == c + 1))
        _write_csv(
            out / "metrics.csv",
            ["sample_id", "class", "dsc", "jaccard", "assd", "hd95", "skipped"],
            [
                [r.sample_id, r.label, _f(r.dsc), _f(r.jaccard),
                 "" if r.skipped else _f(r.assd), "" if r.skipped else _f(r.hd95),
                 int(r.skipped)]
                for r in rows
            ],
        )
        scored = [r for r in rows if not r.skipped]
        summary = {
            "checkpoint_id": checkpoint_id,
            "eval_split": cfg.eval_split,
            "n_rows": len(rows),
            "n_skipped": len(rows) - len(scored),
            "mean_dsc": float(np.mean([r.dsc for r in rows])),
            "mean_jaccard": float(np.mean([r.jaccard for r in rows])),
            "mean_assd": float(np.mean([r.assd for r in scored])) if scored else None,
            "mean_hd95": float(np.mean([r.hd95 for r in scored])) if scored else None,
            "toggles": {"subclass": cfg.subclass_enabled, "refine": cfg.refine_enabled},
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        result.summary = summary
        result.rows = rows
        return result
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc


def _run_cell(args: tuple[dict, str]) -> dict:
    raw, _ = args
    cfg = parse_config(raw)
    return run_pipeline(cfg).summary


def _run_many(configs: list[RunConfig], jobs: int) -> list[dict]:
    payload = [(config_to_dict(c), c.out_dir) for c in configs]
    if jobs <= 1:
        return [_run_cell(p) for p in payload]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, payload))


def _reseeded(cfg: RunConfig, seed: int, out_dir: str) -> RunConfig:
    """Re-derive every section seed from a new top-level seed."""
    raw = config_to_dict(cfg)
    base = cfg.seed
    raw["seed"] = seed
    raw["out_dir"] = out_dir
    raw["synth"]["seed"] = seed + (cfg.synth.seed - base)
    raw["split"]["seed"] = seed + (cfg.split_seed - base)
    raw["train"]["seed"] = seed + (cfg.train.seed - base)
    raw["train"]["cluster_seed"] = seed + (cfg.cluster_seed - base)
    raw["train"]["feature_seed"] = seed + (cfg.feature_seed - base)
    raw["oracle"]["seed"] = seed + (cfg.oracle.seed - base)
    return parse_config(raw)


def run_ablation(cfg: RunConfig, seeds: list[int], jobs: int = 1) -> dict:
    """{sub-classes, refinement} x {on, off} over >= 3 seeds.

    Emits ablation.csv (one row per cell and seed) and ablation_summary.csv
    (mean and sd Dice per cell) under cfg.out_dir, plus the pairwise mean
    orderings against the baseline.
    """
    if len(seeds) < 3:
        raise ValueError("ablation needs at least 3 seeds")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    configs, keys = [], []
    for seed in seeds:
        for name, sub_on, ref_on in ABLATION_CELLS:
            cell_cfg = _reseeded(cfg, seed, str(out / name / f"seed{seed}")).with_toggles(sub_on, ref_on)
            configs.append(cell_cfg)
            keys.append((name, seed))
    summaries = _run_many(configs, jobs)

    by_cell: dict[str, list[float]] = {name: [] for name, _, _ in ABLATION_CELLS}
    rows = []
    for (name, seed), summary in zip(keys, summaries):
        by_cell[name].append(summary["mean_dsc"])
        toggles = dict(zip(("subclass", "refine"), [t for n, *t in ABLATION_CELLS if n == name][0]))
        rows.append([name, int(toggles["subclass"]), int(toggles["refine"]), seed,
                     _f(summary["mean_dsc"]), _f(summary["mean_jaccard"])])
    _write_csv(out / "ablation.csv", ["cell", "subclass", "refine", "seed", "dsc", "jaccard"], rows)

    means = {name: statistics.fmean(v) for name, v in by_cell.items()}
    sds = {name: statistics.pstdev(v) for name, v in by_cell.items()}
    _write_csv(
        out / "ablation_summary.csv",
        ["cell", "mean_dsc", "sd_dsc", "n"],
        [[name, _f(means[name]), _f(sds[name]), len(by_cell[name])] for name, _, _ in ABLATION_CELLS],
    )
    table = {
        "cells": [name for name, _, _ in ABLATION_CELLS],
        "means": means,
        "sds": sds,
        "per_seed": by_cell,
        "orderings": {
            "full_gt_refine_only": means["full"] > means["refine_only"],
            "full_gt_subclass_only": means["full"] > means["subclass_only"],
            "refine_only_gt_baseline": means["refine_only"] > means["baseline"],
            "subclass_only_gt_baseline": means["subclass_only"] > means["baseline"],
            "full_minus_baseline": means["full"] - means["baseline"],
        },
    }
    (out / "ablation_summary.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table


def _apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "K":
        return replace(cfg, k_subclasses=int(value))
    if axis == "beta":
        return replace(cfg, refine=replace(cfg.refine, beta=float(value)))
    if axis == "t":
        return replace(cfg, refine=replace(cfg.refine, walk_steps=int(value)))
    if axis == "gamma":
        return replace(cfg, refine=replace(cfg.refine, radius=int(value)))
    if axis == "theta":
        return replace(cfg, refine=replace(cfg.refine, threshold=float(value)))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def run_sweep(cfg: RunConfig, axis: str, values: list, seeds: list[int] | None = None, jobs: int = 1) -> dict:
    """One pipeline run per (value, seed) along a single axis.

    Emits sweep.csv and a mean-Dice/Jaccard line chart sweep.svg under
    cfg.out_dir.
    """
    if len(values) < 2:
        raise ValueError("a sweep needs at least 2 values")
    seeds = list(seeds) if seeds else [cfg.seed]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    configs, keys = [], []
    for value in values:
        for seed in seeds:
            run_cfg = _apply_axis(
                _reseeded(cfg, seed, str(out / f"{axis}_{value}" / f"seed{seed}")), axis, value
            )
            configs.append(run_cfg)
            keys.append((value, seed))
    summaries = _run_many(configs, jobs)

    rows = []
    by_value: dict = {v: [] for v in values}
    jac_by_value: dict = {v: [] for v in values}
    for (value, seed), summary in zip(keys, summaries):
        by_value[value].append(summary["mean_dsc"])
        jac_by_value[value].append(summary["mean_jaccard"])
        rows.append([axis, value, seed, _f(summary["mean_dsc"]), _f(summary["mean_jaccard"])])
    _write_csv(out / "sweep.csv", ["axis", "value", "seed", "dsc", "jaccard"], rows)

    mean_dsc = [statistics.fmean(by_value[v]) for v in values]
    mean_jac = [statistics.fmean(jac_by_value[v]) for v in values]
    line_chart(
        out / "sweep.svg",
        values,
        {"dsc": mean_dsc, "jaccard": mean_jac},
        title=f"{axis} sweep (mean over {len(seeds)} seed(s))",
        x_label=axis,
    )
    return {
        "axis": axis,
        "values": list(values),
        "mean_dsc": dict(zip(values, mean_dsc)),
        "per_seed": {v: by_value[v] for v in values},
    }


def export_prompt_masks(cfg: RunConfig, store_dir) -> Path:
    """Write every grid-prompt mask of every sample to the PGM store layout.

    Masks land at <store>/<sample_id>/<grid_index>.pgm so a later run with an
    external oracle (store_dir pointed here) reproduces the refinement.
    """
    if cfg.oracle.kind != "synthetic":
        raise ValueError("mask export needs the synthetic oracle")
    store = Path(store_dir)
    store.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(cfg.synth)
    manifest_rows = []
    for sample in dataset.samples:
        sample_dir = store / sample.id
        sample_dir.mkdir(exist_ok=True)
        for prompt in grid_prompts(cfg.synth.image_size, cfg.refine.grid, sample_id=sample.id):
            mask = synthetic_mask(sample, prompt, cfg.oracle)
            quantized = np.rint(np.clip(mask, 0.0, 1.0) * 255).astype(np.uint8)
            write_pgm(sample_dir / f"{prompt.index}.pgm", quantized)
            manifest_rows.append([sample.id, prompt.index])
    manifest = store / "manifest.csv"
    _write_csv(manifest, ["sample_id", "grid_index"], manifest_rows)
    return manifest


def run_probe_to_csv(cfg: RunConfig, eval_interval: int = 10) -> Path:
    """Training-dynamics probe; writes probe.csv (step, loss_p, loss_s, cam_dice)."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    dataset = generate_dataset(cfg.synth)
    train_ds, val_ds, _ = split_dataset(dataset, cfg.split_ratios, cfg.split_seed)
    assignments = cluster_subclasses(
        train_ds.samples, cfg.synth.n_classes, cfg.k_subclasses, cfg.cluster_seed, cfg.feature_seed
    )
    y_p = np.stack([s.y_p for s in train_ds.samples])
    y_s = build_subclass_labels(assignments, y_p, cfg.k_subclasses)
    _, rows = run_probe(
        _net_config(cfg), cfg.train, train_ds.samples, y_s,
        val_samples=val_ds.samples, cam_threshold=cfg.refine.threshold,
        eval_interval=eval_interval,
    )
    path = out / "probe.csv"
    _write_csv(
        path,
        ["step", "loss_p", "loss_s", "cam_dice"],
        [[r.step, _f(r.loss_p), _f(r.loss_s), _f(r.cam_dice)] for r in rows],
    )
    return path
