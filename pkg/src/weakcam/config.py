"""Run configuration: a versioned, strictly validated JSON schema.

Unknown keys are errors. Section seeds default to fixed offsets from the
top-level seed and are written back resolved, so a saved snapshot reproduces
a run without any implicit state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

from .prompts import OracleConfig
from .refine import RefinementConfig
from .subclass import TrainConfig
from .synth import SynthConfig

__all__ = ["RunConfig", "default_config", "parse_config", "load_config", "config_to_dict", "save_config"]

CONFIG_VERSION = 1

# Section-seed offsets from the top-level seed, applied when a section leaves
# its seed unset.
_SEED_OFFSETS = {"synth": 0, "split": 1, "train": 2, "cluster": 3, "feature": 4, "oracle": 5}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str
    synth: SynthConfig
    split_ratios: tuple[float, float, float]
    split_seed: int
    train: TrainConfig
    k_subclasses: int
    cluster_seed: int
    feature_seed: int
    channels: tuple[int, ...]
    strides: tuple[int, ...]
    oracle: OracleConfig
    refine: RefinementConfig
    subclass_enabled: bool
    refine_enabled: bool
    eval_split: str = "train"

    def __post_init__(self):
        if self.k_subclasses < 1:
            raise ValueError("k_subclasses must be at least 1")
        if self.eval_split not in ("train", "val", "test"):
            raise ValueError(f"eval_split must be train/val/test, got {self.eval_split!r}")
        if len(self.split_ratios) != 3:
            raise ValueError("split_ratios must have three entries")

    def with_toggles(self, subclass: bool, refine: bool) -> "RunConfig":
        return replace(self, subclass_enabled=subclass, refine_enabled=refine)


def default_config(seed: int = 0, out_dir: str = "runs/default") -> RunConfig:
    """Desk-scale defaults: 64x64 images, 400 samples, a ~10 minute CPU budget."""
    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        synth=SynthConfig(n_samples=400, image_size=64, seed=seed + _SEED_OFFSETS["synth"]),
        split_ratios=(0.8, 0.1, 0.1),
        split_seed=seed + _SEED_OFFSETS["split"],
        train=TrainConfig(seed=seed + _SEED_OFFSETS["train"]),
        k_subclasses=8,
        cluster_seed=seed + _SEED_OFFSETS["cluster"],
        feature_seed=seed + _SEED_OFFSETS["feature"],
        channels=(8, 12, 12),
        strides=(2, 1, 1),
        oracle=OracleConfig(seed=seed + _SEED_OFFSETS["oracle"]),
        refine=RefinementConfig(),
        subclass_enabled=True,
        refine_enabled=True,
    )


def _take(section: dict, allowed: set[str], where: str) -> dict:
    unknown = set(section) - allowed
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    return dict(section)


def parse_config(raw: dict) -> RunConfig:
    top = _take(
        raw,
        {"version", "seed", "out_dir", "synth", "split", "train", "oracle", "refine", "toggles", "eval_split"},
        "config",
    )
    version = top.get("version")
    if version != CONFIG_VERSION:
        raise ValueError(f"unsupported config version {version!r}; expected {CONFIG_VERSION}")
    seed = int(top.get("seed", 0))

    synth_raw = _take(
        top.get("synth", {}),
        {"n_samples", "image_size", "n_classes", "n_latent_subtypes", "p_class_present",
         "p_halo_given_target", "halo_width", "texture_noise_sigma", "seed"},
        "synth",
    )
    synth_raw.setdefault("n_samples", 400)
    synth_raw.setdefault("seed", seed + _SEED_OFFSETS["synth"])
    synth = SynthConfig(**synth_raw)

    split_raw = _take(top.get("split", {}), {"ratios", "seed"}, "split")
    ratios = tuple(float(r) for r in split_raw.get("ratios", (0.8, 0.1, 0.1)))
    split_seed = int(split_raw.get("seed", seed + _SEED_OFFSETS["split"]))

    train_raw = _take(
        top.get("train", {}),
        {"epochs", "batch_size", "subclass_loss_weight", "peak_lr", "warmup_fraction",
         "start_div", "end_div", "momentum", "seed", "k_subclasses", "cluster_seed",
         "feature_seed", "channels", "strides"},
        "train",
    )
    k_subclasses = int(train_raw.pop("k_subclasses", 8))
    cluster_seed = int(train_raw.pop("cluster_seed", seed + _SEED_OFFSETS["cluster"]))
    feature_seed = int(train_raw.pop("feature_seed", seed + _SEED_OFFSETS["feature"]))
    channels = tuple(int(c) for c in train_raw.pop("channels", (8, 12, 12)))
    strides = tuple(int(s) for s in train_raw.pop("strides", (2,) + (1,) * (len(channels) - 1)))
    if len(strides) != len(channels):
        raise ValueError("train.strides must have one entry per channel")
    train_raw.setdefault("seed", seed + _SEED_OFFSETS["train"])
    train = TrainConfig(**train_raw)

    oracle_raw = _take(
        top.get("oracle", {}),
        {"kind", "boundary_noise_sigma", "leakage_prob", "background_radius", "seed", "store_dir"},
        "oracle",
    )
    oracle_raw.setdefault("seed", seed + _SEED_OFFSETS["oracle"])
    oracle = OracleConfig(**oracle_raw)

    refine_raw = _take(
        top.get("refine", {}),
        {"grid", "radius", "beta", "walk_steps", "threshold", "affinity_source", "intensity_bandwidth"},
        "refine",
    )
    refine = RefinementConfig(**refine_raw)

    toggles = _take(top.get("toggles", {}), {"subclass", "refine"}, "toggles")

    return RunConfig(
        seed=seed,
        out_dir=str(top.get("out_dir", "runs/run")),
        synth=synth,
        split_ratios=ratios,
        split_seed=split_seed,
        train=train,
        k_subclasses=k_subclasses,
        cluster_seed=cluster_seed,
        feature_seed=feature_seed,
        channels=channels,
        strides=strides,
        oracle=oracle,
        refine=refine,
        subclass_enabled=bool(toggles.get("subclass", True)),
        refine_enabled=bool(toggles.get("refine", True)),
        eval_split=str(top.get("eval_split", "train")),
    )


def load_config(path) -> RunConfig:
    return parse_config(json.loads(Path(path).read_text()))


def config_to_dict(cfg: RunConfig) -> dict:
    """Fully resolved dict (every seed explicit); parse_config round-trips it."""
    train = asdict(cfg.train)
    train.update(
        k_subclasses=cfg.k_subclasses,
        cluster_seed=cfg.cluster_seed,
        feature_seed=cfg.feature_seed,
        channels=list(cfg.channels),
        strides=list(cfg.strides),
    )
    return {
        "version": CONFIG_VERSION,
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "synth": asdict(cfg.synth),
        "split": {"ratios": list(cfg.split_ratios), "seed": cfg.split_seed},
        "train": train,
        "oracle": asdict(cfg.oracle),
        "refine": asdict(cfg.refine),
        "toggles": {"subclass": cfg.subclass_enabled, "refine": cfg.refine_enabled},
        "eval_split": cfg.eval_split,
    }


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
