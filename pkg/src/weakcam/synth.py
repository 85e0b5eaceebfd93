"""Synthetic 2-D co-occurrence benchmark.

Each positive sample contains an elliptical target blob whose texture and
eccentricity depend on a latent subtype, and, with high probability, a
surrounding halo ring. The halo has a consistent appearance while the target
varies across subtypes, so an image-level classifier is tempted to rely on
the halo; the halo is nonetheless labeled background in the ground truth.
That is the failure mode the sub-class and refinement stages are meant to fix.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .fields import make_rng
from .formats import read_field, read_pgm, write_field, write_pgm

__all__ = [
    "SynthConfig",
    "Sample",
    "Dataset",
    "generate_dataset",
    "split_dataset",
    "export_dataset",
    "import_dataset",
    "dataset_equal",
]

# Appearance constants (intensities in [0, 1]). The halo is bright and
# consistent while target appearance varies by subtype, so an image-level
# classifier is drawn to the halo; its texture roughness sits between the
# smooth background and the strongly textured targets.
_BG_BASE = 0.15
_BG_WOBBLE = 0.03
_HALO_BASE = 0.78
_HALO_WOBBLE = 0.05
_BLOB_BASE_LO = 0.30
_BLOB_BASE_HI = 0.62
_BLOB_TEXTURE_AMP = 0.12


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int
    image_size: int = 64
    n_classes: int = 1
    n_latent_subtypes: int = 3
    p_class_present: float = 0.5
    p_halo_given_target: float = 0.9
    halo_width: int = 3
    texture_noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if self.n_latent_subtypes < 1:
            raise ValueError("n_latent_subtypes must be at least 1")
        for name in ("p_class_present", "p_halo_given_target"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.halo_width < 1:
            raise ValueError("halo_width must be at least 1")
        if self.texture_noise_sigma < 0:
            raise ValueError("texture_noise_sigma must be non-negative")


@dataclass
class Sample:
    """One image with its image-level labels and evaluation-only fields.

    gt_mask holds class ids (0 = background; halo pixels are background).
    structure_id gives every generated region (blob or halo) a distinct
    positive id and is consumed only by the synthetic prompt oracle.
    latent_subtype[c] is the subtype index for class c, or -1 when absent.
    """

    id: str
    image: np.ndarray
    y_p: np.ndarray
    gt_mask: np.ndarray
    structure_id: np.ndarray | None
    latent_subtype: np.ndarray
    split: str = ""


@dataclass
class Dataset:
    config: SynthConfig | None
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def _subtype_params(k: int) -> tuple[float, float, float]:
    """(texture frequency, axis ratio, base intensity) for subtype k."""
    freq = 2.0 + 3.0 * k
    ratio = 1.0 / (1.0 + 0.35 * min(k, 4))
    span = _BLOB_BASE_HI - _BLOB_BASE_LO
    base = _BLOB_BASE_LO + span * ((k * 0.37) % 1.0)
    return freq, ratio, base


def _ellipse(size: int, cx: float, cy: float, a: float, b: float, phi: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (ys - cy) * np.cos(phi) + (xs - cx) * np.sin(phi)
    v = -(ys - cy) * np.sin(phi) + (xs - cx) * np.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_sample(cfg: SynthConfig, index: int) -> Sample:
    size = cfg.image_size
    rng = make_rng(cfg.seed, index)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    bg_phase = rng.uniform(0, 2 * np.pi)
    image = _BG_BASE + _BG_WOBBLE * np.sin(2 * np.pi * (ys + xs) / size + bg_phase)
    gt = np.zeros((size, size), dtype=np.uint8)
    structure = np.zeros((size, size), dtype=np.uint8)
    y_p = np.zeros(cfg.n_classes, dtype=np.uint8)
    subtype = np.full(cfg.n_classes, -1, dtype=np.int16)
    occupied = np.zeros((size, size), dtype=bool)

    next_structure = 1
    for c in range(cfg.n_classes):
        if rng.random() >= cfg.p_class_present:
            continue
        k = int(rng.integers(cfg.n_latent_subtypes))
        with_halo = rng.random() < cfg.p_halo_given_target
        freq, ratio, base = _subtype_params(k)

        # Shrink per-target size with the class count so several targets
        # (plus halos) can coexist without overlap.
        a = rng.uniform(0.17, 0.23) * size / math.sqrt(cfg.n_classes)
        b = a * ratio
        phi = rng.uniform(0, np.pi)
        reach = float(max(a, b)) + (cfg.halo_width if with_halo else 0)
        margin = int(np.ceil(reach)) + 1
        if 2 * margin >= size:
            raise ValueError(
                f"sample {index}: target of class {c + 1} (extent {reach:.1f}px) "
                f"does not fit in a {size}x{size} image"
            )

        blob = halo = None
        for _ in range(200):
            cy = float(rng.integers(margin, size - margin))
            cx = float(rng.integers(margin, size - margin))
            blob = _ellipse(size, cx, cy, a, b, phi)
            halo = _ellipse(size, cx, cy, a + cfg.halo_width, b + cfg.halo_width, phi) & ~blob
            region = blob | halo if with_halo else blob
            if not (region & occupied).any():
                break
            blob = None
        if blob is None:
            raise ValueError(f"sample {index}: no room left to place class {c + 1}")

        u = (ys - cy) * np.cos(phi) + (xs - cx) * np.sin(phi)
        tex_phase = rng.uniform(0, 2 * np.pi)
        blob_tex = base + _BLOB_TEXTURE_AMP * np.sin(2 * np.pi * freq * u / (2 * a) + tex_phase)
        image[blob] = blob_tex[blob]
        gt[blob] = c + 1
        structure[blob] = next_structure
        occupied |= blob
        next_structure += 1

        if with_halo:
            halo_phase = rng.uniform(0, 2 * np.pi)
            halo_tex = _HALO_BASE + _HALO_WOBBLE * np.sin(2 * np.pi * (ys - xs) / size + halo_phase)
            image[halo] = halo_tex[halo]
            structure[halo] = next_structure
            occupied |= halo
            next_structure += 1

        y_p[c] = 1
        subtype[c] = k

    if cfg.texture_noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.texture_noise_sigma, (size, size))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return Sample(
        id=f"{index:05d}",
        image=image,
        y_p=y_p,
        gt_mask=gt,
        structure_id=structure,
        latent_subtype=subtype,
    )


def generate_dataset(cfg: SynthConfig) -> Dataset:
    """Deterministic in cfg.seed; each sample is seeded by (seed, index)."""
    return Dataset(config=cfg, samples=[generate_sample(cfg, i) for i in range(cfg.n_samples)])


def split_dataset(dataset: Dataset, ratios, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint train/val/test partition, deterministic in seed.

    Split sizes are allocated by largest remainder so they always sum to the
    dataset size; an empty split is an error.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(dataset)
    exact = np.array([r * n for r in ratios])
    sizes = np.floor(exact).astype(int)
    remainder = exact - sizes
    for i in np.argsort(-remainder, kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    if any(s == 0 for s in sizes):
        raise ValueError(f"split sizes {tuple(int(s) for s in sizes)} contain an empty split")

    perm = make_rng(seed).permutation(n)
    bounds = np.cumsum(sizes)
    parts = []
    names = ("train", "val", "test")
    start = 0
    for name, stop in zip(names, bounds):
        idx = sorted(int(i) for i in perm[start:stop])
        samples = []
        for i in idx:
            s = dataset.samples[i]
            s.split = name
            samples.append(s)
        parts.append(Dataset(config=dataset.config, samples=samples))
        start = stop
    return parts[0], parts[1], parts[2]


def export_dataset(dataset: Dataset, out_dir) -> Path:
    """Write the dataset directory layout; returns the manifest path.

    Layout: images/<id>.wcf, masks/<id>.pgm, structures/<id>.pgm,
    manifest.csv (id, y_p_bits, subtype_ids, split) and synth_config.json.
    The structure-id masks make a re-imported dataset usable with the
    synthetic prompt oracle and the round trip bit-exact.
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "structures"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "y_p_bits", "subtype_ids", "split"])
        for s in dataset.samples:
            write_field(out / "images" / f"{s.id}.wcf", s.image)
            write_pgm(out / "masks" / f"{s.id}.pgm", s.gt_mask)
            if s.structure_id is not None:
                write_pgm(out / "structures" / f"{s.id}.pgm", s.structure_id)
            bits = "".join(str(int(v)) for v in s.y_p)
            subtypes = ";".join(str(int(v)) for v in s.latent_subtype)
            writer.writerow([s.id, bits, subtypes, s.split])
    if dataset.config is not None:
        (out / "synth_config.json").write_text(json.dumps(asdict(dataset.config), indent=2) + "\n")
    return manifest


def import_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    cfg = None
    cfg_path = root / "synth_config.json"
    if cfg_path.exists():
        cfg = SynthConfig(**json.loads(cfg_path.read_text()))
    samples = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["id"]
            image = read_field(root / "images" / f"{sid}.wcf")
            gt, _ = read_pgm(root / "masks" / f"{sid}.pgm")
            structure_path = root / "structures" / f"{sid}.pgm"
            structure = read_pgm(structure_path)[0] if structure_path.exists() else None
            y_p = np.array([int(ch) for ch in row["y_p_bits"]], dtype=np.uint8)
            subtype = np.array([int(v) for v in row["subtype_ids"].split(";")], dtype=np.int16)
            samples.append(
                Sample(
                    id=sid,
                    image=image,
                    y_p=y_p,
                    gt_mask=gt,
                    structure_id=structure,
                    latent_subtype=subtype,
                    split=row["split"],
                )
            )
    return Dataset(config=cfg, samples=samples)


def dataset_equal(a: Dataset, b: Dataset) -> bool:
    if a.config != b.config or len(a) != len(b):
        return False
    for sa, sb in zip(a.samples, b.samples):
        if sa.id != sb.id or sa.split != sb.split:
            return False
        if not np.array_equal(sa.image, sb.image):
            return False
        if not (np.array_equal(sa.y_p, sb.y_p) and np.array_equal(sa.gt_mask, sb.gt_mask)):
            return False
        if (sa.structure_id is None) != (sb.structure_id is None):
            return False
        if sa.structure_id is not None and not np.array_equal(sa.structure_id, sb.structure_id):
            return False
        if not np.array_equal(sa.latent_subtype, sb.latent_subtype):
            return False
    return True
