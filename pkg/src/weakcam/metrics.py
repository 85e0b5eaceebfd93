"""Segmentation quality metrics: Dice, Jaccard, ASSD, HD95.

Empty-mask policy: the overlap metrics define empty/empty = 1 and
empty/nonempty = 0; the surface metrics have no finite value for an empty
side and raise EmptyMaskError instead, so callers can skip and count those
pairs.

Boundaries use the 4-connectivity convention: a mask pixel is boundary when
at least one of its 4 neighbours (or the outside of the array) is background.
HD95 uses linear interpolation between order statistics of the pooled
directed distances: with n sorted values, pos = (n - 1) * 0.95,
value = s[floor(pos)] + (s[floor(pos) + 1] - s[floor(pos)]) * frac.
Reductions use exact summation so results do not depend on traversal order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EmptyMaskError",
    "dice",
    "jaccard",
    "boundary_points",
    "assd",
    "hd95",
    "score_pair",
    "SampleMetrics",
    "MetricReport",
    "aggregate",
]


class EmptyMaskError(ValueError):
    """Raised by the surface metrics when a mask has no foreground pixel."""

    def __init__(self, side: str):
        self.side = side
        super().__init__(f"surface distance undefined: {side} mask is empty")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p.astype(bool), g.astype(bool)


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    a, b = int(p.sum()), int(g.sum())
    if a == 0 and b == 0:
        return 1.0
    inter = int(np.logical_and(p, g).sum())
    return 2.0 * inter / (a + b)


def jaccard(pred, gt) -> float:
    p, g = _pair(pred, gt)
    inter = int(np.logical_and(p, g).sum())
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return inter / union


def boundary_points(mask) -> np.ndarray:
    """(n, 2) row-major coordinates of the 4-connectivity boundary of a mask."""
    m = np.asarray(mask).astype(bool)
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    # Pixels on the array edge always border the outside.
    interior[0, :] = False
    interior[-1, :] = False
    interior[:, 0] = False
    interior[:, -1] = False
    return np.argwhere(m & ~interior)


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per src point, Euclidean distance to the nearest dst point."""
    d2 = (src[:, None, 0] - dst[None, :, 0]) ** 2 + (src[:, None, 1] - dst[None, :, 1]) ** 2
    return np.sqrt(d2.min(axis=1).astype(np.float64))


def _boundary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _pair(pred, gt)
    if not p.any():
        raise EmptyMaskError("pred")
    if not g.any():
        raise EmptyMaskError("gt")
    return boundary_points(p), boundary_points(g)


def assd(pred, gt) -> float:
    """Average symmetric surface distance in pixels (mean of the two directed means)."""
    bp, bg = _boundary_pair(pred, gt)
    d_pg = _directed_distances(bp, bg)
    d_gp = _directed_distances(bg, bp)
    return 0.5 * (math.fsum(d_pg) / d_pg.size + math.fsum(d_gp) / d_gp.size)


def _percentile_linear(values: np.ndarray, q: float) -> float:
    s = np.sort(values)
    pos = (s.size - 1) * q
    lo = int(math.floor(pos))
    frac = pos - lo
    if lo + 1 >= s.size:
        return float(s[lo])
    return float(s[lo] + (s[lo + 1] - s[lo]) * frac)


def hd95(pred, gt) -> float:
    """95th percentile of the pooled directed boundary distances in both directions."""
    bp, bg = _boundary_pair(pred, gt)
    pooled = np.concatenate([_directed_distances(bp, bg), _directed_distances(bg, bp)])
    return _percentile_linear(pooled, 0.95)


@dataclass(frozen=True)
class SampleMetrics:
    """Per-(sample, class) scores; assd/hd95 are None when the pair was skipped."""

    sample_id: str
    label: int
    dsc: float
    jaccard: float
    assd: float | None
    hd95: float | None

    @property
    def skipped(self) -> bool:
        return self.assd is None


def score_pair(sample_id: str, label: int, pred, gt) -> SampleMetrics:
    """Score one binary pair under the empty-mask policy."""
    d = dice(pred, gt)
    j = jaccard(pred, gt)
    try:
        a = assd(pred, gt)
        h = hd95(pred, gt)
    except EmptyMaskError:
        a = None
        h = None
    return SampleMetrics(sample_id=sample_id, label=label, dsc=d, jaccard=j, assd=a, hd95=h)


@dataclass(frozen=True)
class MetricReport:
    mean_dsc: float
    mean_jaccard: float
    mean_assd: float
    mean_hd95: float
    n_scored: int
    n_skipped: int
    skipped_ids: tuple[str, ...]


def aggregate(rows: list[SampleMetrics]) -> MetricReport:
    """Unweighted per-sample means; surface means run over the non-skipped rows."""
    if not rows:
        raise ValueError("no reports to aggregate")
    scored = [r for r in rows if not r.skipped]
    skipped = [r for r in rows if r.skipped]
    if not scored:
        raise ValueError("no scoreable samples: every pair was skipped by the empty-mask policy")
    return MetricReport(
        mean_dsc=math.fsum(r.dsc for r in rows) / len(rows),
        mean_jaccard=math.fsum(r.jaccard for r in rows) / len(rows),
        mean_assd=math.fsum(r.assd for r in scored) / len(scored),
        mean_hd95=math.fsum(r.hd95 for r in scored) / len(scored),
        n_scored=len(scored),
        n_skipped=len(skipped),
        skipped_ids=tuple(f"{r.sample_id}:{r.label}" for r in skipped),
    )
