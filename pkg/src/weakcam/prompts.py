"""Point-prompt mask oracles.

The oracle contract is mask-in/mask-out: a point prompt yields a soft mask in
[0, 1] at full image resolution. The synthetic oracle answers from the
generator's latent structure ids (the connected structure under the prompt,
optionally jittered and dilated to model an imperfect mask decoder); the
external oracle reads masks precomputed offline by any tool from a PGM store.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .fields import make_rng
from .formats import read_pgm
from .synth import Sample

__all__ = [
    "PointPrompt",
    "OracleConfig",
    "grid_prompts",
    "synthetic_mask",
    "external_mask",
    "prompt_masks",
]

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PointPrompt:
    row: int
    col: int
    sample_id: str = ""
    index: int = -1


def grid_prompts(image_size: int, grid: int, sample_id: str = "") -> list[PointPrompt]:
    """One prompt per cell of a grid x grid partition, at the cell centers.

    Centers are floor(((2i + 1) * size) / (2 * grid)); prompts come back in
    row-major order, which is also the store index order.
    """
    if grid < 1 or grid > image_size:
        raise ValueError(f"grid must be in [1, {image_size}], got {grid}")
    centers = [((2 * i + 1) * image_size) // (2 * grid) for i in range(grid)]
    prompts = []
    for gi, r in enumerate(centers):
        for gj, c in enumerate(centers):
            prompts.append(PointPrompt(row=r, col=c, sample_id=sample_id, index=gi * grid + gj))
    return prompts


@dataclass(frozen=True)
class OracleConfig:
    kind: str = "synthetic"
    boundary_noise_sigma: float = 0.0
    leakage_prob: float = 0.0
    background_radius: int = 8
    seed: int = 0
    store_dir: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "external"):
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        if not 0.0 <= self.leakage_prob <= 1.0:
            raise ValueError("leakage_prob must be in [0, 1]")
        if self.boundary_noise_sigma < 0:
            raise ValueError("boundary_noise_sigma must be non-negative")
        if self.background_radius < 1:
            raise ValueError("background_radius must be at least 1")
        if self.kind == "external" and not self.store_dir:
            raise ValueError("external oracle needs a store_dir")


def _prompt_rng(cfg: OracleConfig, sample_id: str, prompt: PointPrompt) -> np.random.Generator:
    sid = zlib.crc32(sample_id.encode("utf-8"))
    return make_rng(cfg.seed, sid, prompt.row, prompt.col)


def synthetic_mask(
    sample: Sample,
    prompt: PointPrompt,
    cfg: OracleConfig,
    _components: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Mask of the structure under the prompt (8-connected component).

    Background prompts are clipped to a disk of background_radius around the
    prompt. boundary_noise_sigma wobbles the boundary by perturbing the signed
    distance with a smooth noise field; with probability leakage_prob the mask
    dilates one step across the boundary. Deterministic in
    (oracle seed, sample id, prompt position).

    _components optionally carries precomputed per-structure-id labelings so
    batch callers label each structure once instead of once per prompt.
    """
    if sample.structure_id is None:
        raise ValueError(
            f"sample {sample.id} has no structure ids; use the external oracle for this dataset"
        )
    structure = sample.structure_id
    h, w = structure.shape
    if not (0 <= prompt.row < h and 0 <= prompt.col < w):
        raise ValueError(f"prompt ({prompt.row}, {prompt.col}) outside a {h}x{w} image")

    sid = int(structure[prompt.row, prompt.col])
    if _components is not None and sid in _components:
        components = _components[sid]
    else:
        components, _ = ndimage.label(structure == sid, structure=_EIGHT)
        if _components is not None:
            _components[sid] = components
    mask = components == components[prompt.row, prompt.col]
    if sid == 0:
        ys, xs = np.mgrid[0:h, 0:w]
        disk = (ys - prompt.row) ** 2 + (xs - prompt.col) ** 2 <= cfg.background_radius**2
        mask &= disk

    rng = _prompt_rng(cfg, sample.id, prompt)
    if cfg.boundary_noise_sigma > 0:
        inside = ndimage.distance_transform_edt(mask)
        outside = ndimage.distance_transform_edt(~mask)
        signed = inside - outside
        noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=2.0)
        spread = noise.std()
        if spread > 0:
            noise = noise / spread
        mask = (signed + cfg.boundary_noise_sigma * noise) > 0
        mask[prompt.row, prompt.col] = True
    if cfg.leakage_prob > 0 and rng.random() < cfg.leakage_prob:
        mask = ndimage.binary_dilation(mask, structure=_EIGHT)
    return mask.astype(np.float64)


def external_mask(store_dir, prompt: PointPrompt, expected_shape) -> np.ndarray:
    """Load <store_dir>/<sample_id>/<grid_index>.pgm, rescaled to [0, 1]."""
    path = Path(store_dir) / prompt.sample_id / f"{prompt.index}.pgm"
    if not path.exists():
        raise FileNotFoundError(f"missing prompt mask file: {path}")
    values, maxval = read_pgm(path)
    if values.shape != tuple(expected_shape):
        raise ValueError(f"{path}: mask shape {values.shape} does not match image {tuple(expected_shape)}")
    return values.astype(np.float64) / maxval


def prompt_masks(sample: Sample, prompts: list[PointPrompt], cfg: OracleConfig) -> list[np.ndarray]:
    """All prompt masks for one sample via the configured oracle backend."""
    if cfg.kind == "external":
        shape = sample.image.shape
        return [external_mask(cfg.store_dir, p, shape) for p in prompts]
    components: dict[int, np.ndarray] = {}
    return [synthetic_mask(sample, p, cfg, _components=components) for p in prompts]
