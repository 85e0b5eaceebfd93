"""Dense 2-D fields, small sparse matrices, and seeded RNG construction.

A field is a plain float ndarray of shape (h, w). Whenever a field is
vectorized, cell (r, c) maps to flat index ``r * w + c`` (row-major); every
matrix built over a grid uses the same ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "make_rng",
    "as_field",
    "minmax_normalize",
    "downsample_avg",
    "SparseMatrix",
    "sparse_from_entries",
    "sparse_identity",
    "sparse_matvec",
    "hadamard_power",
    "is_symmetric",
]


def make_rng(*key: int) -> np.random.Generator:
    """PCG64 generator keyed by one or more integers.

    The same key yields the same stream on every platform, which is what the
    clustering-seed and rerun-reproducibility studies rely on.
    """
    return np.random.default_rng(list(key))


def as_field(values, name: str = "field") -> np.ndarray:
    f = np.asarray(values, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise ValueError(f"{name} must be 2-D with positive shape, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name} contains non-finite values")
    return f


def minmax_normalize(field) -> np.ndarray:
    """Rescale a field to [0, 1]; a (near-)constant field maps to all zeros."""
    f = as_field(field)
    lo = float(f.min())
    span = float(f.max()) - lo
    if span < 1e-12:
        return np.zeros_like(f)
    return (f - lo) / span


def downsample_avg(field, h2: int, w2: int) -> np.ndarray:
    """Block-average a field down to (h2, w2).

    The target shape must divide the source shape; the mean of the output
    equals the mean of the input.
    """
    f = as_field(field)
    h, w = f.shape
    if h2 < 1 or w2 < 1 or h % h2 != 0 or w % w2 != 0:
        raise ValueError(f"cannot block-average {h}x{w} down to {h2}x{w2}")
    return f.reshape(h2, h // h2, w2, w // w2).mean(axis=(1, 3))


@dataclass(frozen=True)
class SparseMatrix:
    """Square sparse matrix in coordinate form, entries sorted by (row, col).

    Row-stochastic matrices built by ``refine.transition_matrix`` additionally
    carry ``raw_weights`` (the unnormalized entries) and ``row_sums``;
    ``sparse_matvec`` then accumulates the raw row products and divides once
    per row. With that factoring a constant vector is an exact fixed point,
    not merely a fixed point up to rounding.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    raw_weights: np.ndarray | None = None
    row_sums: np.ndarray | None = None

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[self.rows, self.cols] = self.weights
        return out


def sparse_from_entries(n: int, rows, cols, weights) -> SparseMatrix:
    """Build a SparseMatrix from coordinate lists, canonicalizing entry order."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if not (rows.shape == cols.shape == weights.shape) or rows.ndim != 1:
        raise ValueError("rows, cols and weights must be 1-D arrays of equal length")
    if n < 1:
        raise ValueError("matrix dimension must be positive")
    if rows.size:
        if rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= n:
            raise ValueError(f"entry index out of range for dimension {n}")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise ValueError("weights must be finite and positive")
    order = np.lexsort((cols, rows))
    rows, cols, weights = rows[order], cols[order], weights[order]
    if rows.size > 1:
        dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
        if np.any(dup):
            i = int(np.argmax(dup))
            raise ValueError(f"duplicate entry at ({rows[i]}, {cols[i]})")
    return SparseMatrix(n=n, rows=rows, cols=cols, weights=weights)


def sparse_identity(n: int) -> SparseMatrix:
    idx = np.arange(n, dtype=np.int64)
    return SparseMatrix(n=n, rows=idx, cols=idx, weights=np.ones(n))


def sparse_matvec(m: SparseMatrix, v) -> np.ndarray:
    """out[i] = sum_j m[i, j] * v[j].

    Stochastic matrices with a factored representation are applied as
    (raw row dot v) / row_sum; see SparseMatrix.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (m.n,):
        raise ValueError(f"vector length {v.shape} does not match dimension {m.n}")
    if m.raw_weights is not None:
        acc = np.bincount(m.rows, weights=m.raw_weights * v[m.cols], minlength=m.n)
        return acc / m.row_sums
    return np.bincount(m.rows, weights=m.weights * v[m.cols], minlength=m.n)


def hadamard_power(a: SparseMatrix, beta: float) -> SparseMatrix:
    """Element-wise power of the stored entries; suppresses weak affinities.

    Requires beta >= 1 (beta = 1 is the neutral case) and entries in (0, 1],
    so the result keeps the sparsity pattern and stays in (0, 1].
    """
    if beta < 1:
        raise ValueError(f"hadamard power requires beta >= 1, got {beta}")
    if a.weights.size and (np.any(a.weights <= 0) or np.any(a.weights > 1)):
        raise ValueError("hadamard power requires entries in (0, 1]")
    return SparseMatrix(n=a.n, rows=a.rows, cols=a.cols, weights=a.weights**beta)


def is_symmetric(m: SparseMatrix, tol: float = 0.0) -> bool:
    """True when entry (i, j) is matched by (j, i) with equal weight."""
    order = np.lexsort((m.rows, m.cols))
    if not (np.array_equal(m.rows, m.cols[order]) and np.array_equal(m.cols, m.rows[order])):
        return False
    return bool(np.all(np.abs(m.weights - m.weights[order]) <= tol))
