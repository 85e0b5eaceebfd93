"""CAM refinement by random walk over prompt-derived affinities.

Prompt masks are aggregated into a normalized affinity field at the CAM
(working) resolution; pairwise affinities within a local circle form a
symmetric matrix whose element-wise power and row normalization give the
walk's transition matrix. Cell (r, c) of the working grid is flat index
r * w + c throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import (
    SparseMatrix,
    as_field,
    downsample_avg,
    hadamard_power,
    minmax_normalize,
    sparse_matvec,
)

__all__ = [
    "RefinementConfig",
    "aggregate_affinity",
    "pairwise_affinity",
    "intensity_affinity_baseline",
    "transition_matrix",
    "random_walk",
    "refine_cams",
    "pseudo_label",
]


@dataclass(frozen=True)
class RefinementConfig:
    grid: int = 8
    radius: int = 5
    beta: float = 4.0
    walk_steps: int = 4
    threshold: float = 0.25
    affinity_source: str = "prompts"
    intensity_bandwidth: float = 0.1

    def __post_init__(self):
        if self.grid < 1:
            raise ValueError("prompt grid must be at least 1")
        if self.radius < 1:
            raise ValueError("affinity radius must be at least 1")
        if self.beta < 1:
            raise ValueError("beta must be at least 1")
        if self.walk_steps < 0:
            raise ValueError("walk step count must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if self.affinity_source not in ("prompts", "intensity"):
            raise ValueError(f"unknown affinity source {self.affinity_source!r}")
        if self.intensity_bandwidth <= 0:
            raise ValueError("intensity bandwidth must be positive")


def aggregate_affinity(masks, work_h: int, work_w: int) -> np.ndarray:
    """Sum the prompt masks, min-max normalize, block-average to the working grid."""
    if not masks:
        raise ValueError("need at least one prompt mask")
    stack = [as_field(m, "prompt mask") for m in masks]
    shape = stack[0].shape
    for m in stack[1:]:
        if m.shape != shape:
            raise ValueError(f"prompt mask shapes differ: {m.shape} vs {shape}")
    total = np.zeros(shape)
    for m in stack:
        total += m
    return downsample_avg(minmax_normalize(total), work_h, work_w)


def _disk_offsets(radius: int) -> list[tuple[int, int]]:
    out = []
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if (dr or dc) and dr * dr + dc * dc <= radius * radius:
                out.append((dr, dc))
    return out


def _local_kernel_matrix(values: np.ndarray, radius: int, scale: float) -> SparseMatrix:
    """exp(-|v_i - v_j| / scale) for cell pairs within the radius, unit diagonal."""
    h, w = values.shape
    n = h * w
    flat_index = np.arange(n).reshape(h, w)
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    weights = [np.ones(n)]
    for dr, dc in _disk_offsets(radius):
        r0, r1 = max(0, -dr), min(h, h - dr)
        c0, c1 = max(0, -dc), min(w, w - dc)
        if r1 <= r0 or c1 <= c0:
            continue
        src_r, src_c = slice(r0, r1), slice(c0, c1)
        dst_r, dst_c = slice(r0 + dr, r1 + dr), slice(c0 + dc, c1 + dc)
        i = flat_index[src_r, src_c].ravel()
        j = flat_index[dst_r, dst_c].ravel()
        diff = np.abs(values[src_r, src_c] - values[dst_r, dst_c]).ravel()
        rows.append(i)
        cols.append(j)
        weights.append(np.exp(-diff / scale))
    order_rows = np.concatenate(rows)
    order_cols = np.concatenate(cols)
    order_weights = np.concatenate(weights)
    srt = np.lexsort((order_cols, order_rows))
    return SparseMatrix(n=n, rows=order_rows[srt], cols=order_cols[srt], weights=order_weights[srt])


def pairwise_affinity(affinity_field, radius: int) -> SparseMatrix:
    """Symmetric local affinity a_ij = exp(-|M_i - M_j|), diagonal fixed at 1."""
    if radius < 1:
        raise ValueError("radius must be at least 1")
    return _local_kernel_matrix(as_field(affinity_field, "affinity field"), radius, scale=1.0)


def intensity_affinity_baseline(image, radius: int, bandwidth: float, work_h: int, work_w: int) -> SparseMatrix:
    """Refinement baseline: affinities from block-averaged raw intensities.

    Same structure as pairwise_affinity but with a_ij = exp(-|I_i - I_j| / bandwidth),
    so it feeds the same transition-matrix and random-walk path.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    small = downsample_avg(as_field(image, "image"), work_h, work_w)
    return _local_kernel_matrix(small, radius, scale=bandwidth)


def transition_matrix(affinity: SparseMatrix, beta: float) -> SparseMatrix:
    """Row-normalized element-wise power of the affinity matrix.

    The returned matrix keeps the powered entries and their row sums alongside
    the normalized weights; sparse_matvec uses the factored form (see
    fields.SparseMatrix).
    """
    powered = hadamard_power(affinity, beta)
    counts = np.bincount(powered.rows, minlength=powered.n)
    if np.any(counts == 0):
        raise RuntimeError("transition matrix has an empty row; affinity diagonal missing")
    row_sums = np.bincount(powered.rows, weights=powered.weights, minlength=powered.n)
    if np.any(row_sums <= 0):
        raise RuntimeError("transition matrix has a non-positive row sum")
    return SparseMatrix(
        n=powered.n,
        rows=powered.rows,
        cols=powered.cols,
        weights=powered.weights / row_sums[powered.rows],
        raw_weights=powered.weights,
        row_sums=row_sums,
    )


def random_walk(transition: SparseMatrix, cam: np.ndarray, steps: int) -> np.ndarray:
    """Apply the transition matrix `steps` times to the vectorized map.

    steps = 0 returns the map unchanged; otherwise the result is re-normalized
    by its maximum (when nonzero) so thresholds stay comparable before and
    after refinement.
    """
    m = as_field(cam, "cam")
    if steps < 0:
        raise ValueError("step count must be non-negative")
    if m.size != transition.n:
        raise ValueError(f"cam has {m.size} cells but the matrix dimension is {transition.n}")
    if steps == 0:
        return m.copy()
    v = m.ravel()
    for _ in range(steps):
        v = sparse_matvec(transition, v)
    out = v.reshape(m.shape)
    peak = out.max()
    if peak > 0:
        out = out / peak
    return out


def refine_cams(transition: SparseMatrix, cams: np.ndarray, steps: int) -> np.ndarray:
    """Random walk applied independently to each class map of a (C, h, w) stack."""
    return np.stack([random_walk(transition, cams[c], steps) for c in range(cams.shape[0])])


def pseudo_label(cams: np.ndarray, threshold: float, out_shape) -> np.ndarray:
    """Threshold a (C, h, w) CAM stack into a class-id map at out_shape.

    Per cell: the argmax class when its value reaches the threshold, else
    background (0); ties resolve to the lowest class id. Upsampling to the
    output shape is nearest-neighbour.
    """
    cams = np.asarray(cams, dtype=np.float64)
    if cams.ndim != 3:
        raise ValueError(f"expected a (C, h, w) stack, got shape {cams.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    best = cams.argmax(axis=0)
    value = cams.max(axis=0)
    labels = np.where(value >= threshold, best + 1, 0).astype(np.uint8)
    h, w = labels.shape
    out_h, out_w = out_shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return labels[np.ix_(rows, cols)]
