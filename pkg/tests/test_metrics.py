import math

import numpy as np
import pytest

from weakcam.fields import make_rng
from weakcam.metrics import (
    EmptyMaskError,
    SampleMetrics,
    aggregate,
    assd,
    boundary_points,
    dice,
    hd95,
    jaccard,
    score_pair,
)

# ---------------------------------------------------------------------------
# Brute-force oracle: per-pixel loops, no shared code with the implementation.
# Distances between integer coordinates are exact in float64, and both sides
# use exact summation and the same documented percentile formula, so equality
# is checked bit for bit.
# ---------------------------------------------------------------------------


def oracle_boundary(mask):
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    pts = []
    for r in range(h):
        for c in range(w):
            if not m[r, c]:
                continue
            on_edge = r == 0 or c == 0 or r == h - 1 or c == w - 1
            neighbours = [
                m[r - 1, c] if r > 0 else False,
                m[r + 1, c] if r < h - 1 else False,
                m[r, c - 1] if c > 0 else False,
                m[r, c + 1] if c < w - 1 else False,
            ]
            if on_edge or not all(neighbours):
                pts.append((r, c))
    return pts


def oracle_directed(src, dst):
    out = []
    for r, c in src:
        best = math.inf
        for r2, c2 in dst:
            d = math.sqrt((r - r2) * (r - r2) + (c - c2) * (c - c2))
            if d < best:
                best = d
        out.append(best)
    return out


def oracle_assd(pred, gt):
    bp = oracle_boundary(pred)
    bg = oracle_boundary(gt)
    d1 = oracle_directed(bp, bg)
    d2 = oracle_directed(bg, bp)
    return 0.5 * (math.fsum(d1) / len(d1) + math.fsum(d2) / len(d2))


def oracle_hd95(pred, gt):
    bp = oracle_boundary(pred)
    bg = oracle_boundary(gt)
    pooled = sorted(oracle_directed(bp, bg) + oracle_directed(bg, bp))
    pos = (len(pooled) - 1) * 0.95
    lo = math.floor(pos)
    frac = pos - lo
    if lo + 1 >= len(pooled):
        return pooled[lo]
    return pooled[lo] + (pooled[lo + 1] - pooled[lo]) * frac


def oracle_hausdorff(pred, gt):
    bp = oracle_boundary(pred)
    bg = oracle_boundary(gt)
    return max(max(oracle_directed(bp, bg)), max(oracle_directed(bg, bp)))


def random_mask_pairs(n_pairs, size, seed):
    rng = make_rng(seed)
    pairs = []
    while len(pairs) < n_pairs:
        p = rng.random((size, size)) < rng.uniform(0.1, 0.6)
        g = rng.random((size, size)) < rng.uniform(0.1, 0.6)
        if p.any() and g.any():
            pairs.append((p, g))
    return pairs


class TestOverlapMetrics:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4), bool)
        m[1:3, 1:3] = True
        assert dice(m, m) == 1.0
        assert jaccard(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0] = True
        b[3, 3] = True
        assert dice(a, b) == 0.0
        assert jaccard(a, b) == 0.0

    def test_hand_values(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, :4] = True
        b[0, 2:4] = True
        b[1, 0:2] = True
        # |A| = 4, |B| = 4, |A and B| = 2, |A or B| = 6
        assert dice(a, b) == 0.5
        assert jaccard(a, b) == pytest.approx(1 / 3, abs=1e-15)

    def test_empty_policy(self):
        empty = np.zeros((3, 3), bool)
        full = ~empty
        assert dice(empty, empty) == 1.0
        assert jaccard(empty, empty) == 1.0
        assert dice(empty, full) == 0.0
        assert jaccard(full, empty) == 0.0

    def test_dice_jaccard_identity(self):
        for p, g in random_mask_pairs(25, 9, seed=4):
            d, j = dice(p, g), jaccard(p, g)
            assert abs(d - 2 * j / (1 + j)) < 1e-12
            assert j <= d + 1e-15

    def test_symmetry_and_monotonicity(self):
        rng = make_rng(7)
        for p, g in random_mask_pairs(10, 8, seed=8):
            assert dice(p, g) == dice(g, p)
            assert jaccard(p, g) == jaccard(g, p)
            grow = p | g  # add true positives only
            missing = np.argwhere(g & ~p)
            if len(missing):
                p2 = p.copy()
                r, c = missing[rng.integers(len(missing))]
                p2[r, c] = True
                assert dice(p2, g) >= dice(p, g)
                assert jaccard(p2, g) >= jaccard(p, g)
            assert dice(grow, g) >= dice(p, g) - 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            dice(np.zeros((2, 2)), np.zeros((3, 3)))


class TestSurfaceMetrics:
    def test_identical_masks_zero(self):
        m = np.zeros((6, 6), bool)
        m[2:5, 1:4] = True
        assert assd(m, m) == 0.0
        assert hd95(m, m) == 0.0

    def test_single_pixels_three_apart(self):
        a = np.zeros((5, 7), bool)
        b = np.zeros((5, 7), bool)
        a[2, 1] = True
        b[2, 4] = True
        assert assd(a, b) == 3.0

    def test_empty_raises_with_side(self):
        m = np.ones((3, 3), bool)
        with pytest.raises(EmptyMaskError) as err:
            assd(np.zeros((3, 3), bool), m)
        assert err.value.side == "pred"
        with pytest.raises(EmptyMaskError) as err:
            hd95(m, np.zeros((3, 3), bool))
        assert err.value.side == "gt"

    def test_boundary_matches_oracle(self):
        for p, _ in random_mask_pairs(20, 10, seed=5):
            got = [tuple(x) for x in boundary_points(p)]
            assert got == oracle_boundary(p)

    def test_matches_brute_force_exactly(self):
        # Exhaustive check of the fixture corpus at sizes up to 12x12.
        for size in (5, 8, 12):
            for p, g in random_mask_pairs(40, size, seed=100 + size):
                assert assd(p, g) == oracle_assd(p, g)
                assert hd95(p, g) == oracle_hd95(p, g)

    def test_symmetry(self):
        for p, g in random_mask_pairs(15, 9, seed=6):
            assert assd(p, g) == assd(g, p)
            assert hd95(p, g) == hd95(g, p)

    def test_hd95_at_most_hausdorff(self):
        for p, g in random_mask_pairs(30, 10, seed=9):
            assert hd95(p, g) <= oracle_hausdorff(p, g) + 1e-12

    def test_zero_iff_boundaries_coincide(self):
        a = np.zeros((6, 6), bool)
        a[1:5, 1:5] = True
        b = a.copy()
        b[2:4, 2:4] = True  # same boundary, same mask
        assert assd(a, b) == 0.0
        c = a.copy()
        c[1, 1] = False
        assert assd(a, c) > 0.0


class TestAggregate:
    def row(self, sid, d, a):
        return SampleMetrics(sample_id=sid, label=1, dsc=d, jaccard=d / (2 - d), assd=a, hd95=a)

    def test_single_report_is_itself(self):
        r = self.row("a", 0.4, 2.0)
        rep = aggregate([r])
        assert rep.mean_dsc == 0.4
        assert rep.mean_assd == 2.0
        assert rep.n_skipped == 0

    def test_two_reports_mean(self):
        rep = aggregate([self.row("a", 0.4, 1.0), self.row("b", 0.6, 3.0)])
        assert rep.mean_dsc == pytest.approx(0.5, abs=1e-15)
        assert rep.mean_assd == pytest.approx(2.0, abs=1e-15)

    def test_skip_accounting(self):
        rows = [self.row("a", 0.4, 1.0), self.row("b", 0.6, 3.0),
                SampleMetrics("c", 1, 0.0, 0.0, None, None)]
        rep = aggregate(rows)
        assert rep.n_skipped == 1
        assert rep.skipped_ids == ("c:1",)
        assert rep.mean_assd == pytest.approx(2.0, abs=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no reports"):
            aggregate([])

    def test_all_skipped_rejected(self):
        with pytest.raises(ValueError, match="no scoreable"):
            aggregate([SampleMetrics("a", 1, 1.0, 1.0, None, None)])

    def test_score_pair_applies_policy(self):
        gt = np.zeros((4, 4), bool)
        gt[1, 1] = True
        row = score_pair("s", 1, np.zeros((4, 4), bool), gt)
        assert row.skipped and row.dsc == 0.0
        row = score_pair("s", 1, gt, gt)
        assert not row.skipped and row.assd == 0.0
