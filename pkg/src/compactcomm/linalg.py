"""Dense float32 matrix substrate: products, Gram-Schmidt, norms, seeded RNG.

Matrices are plain 2-D float32 numpy arrays, frozen (non-writeable) on
construction so they can be shared across workers. Norms and dot products
accumulate in float64 and results are stored back in float32.
"""

from __future__ import annotations

import numpy as np

# Squared-norm below this counts as a degenerate (dependent) column.
DEGENERATE_COL_TOL = 1e-12


class ShapeError(ValueError):
    pass


def make_rng(seed):
    """PCG64 generator; identical seed gives an identical sample stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_rng(seed, *key):
    """Independent deterministic stream for a (seed, key...) combination."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))))


def freeze(a):
    a.flags.writeable = False
    return a


def as_matrix(data, rows=None, cols=None):
    """Validate/convert to a frozen rows x cols float32 matrix of finite reals."""
    m = np.asarray(data, dtype=np.float32)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape != (rows, cols):
        raise ShapeError(f"expected shape ({rows}, {cols}), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    if m.base is not None or m.flags.writeable:
        m = m.copy()
    return freeze(m)


def matmul(a, b):
    """Matrix product with float64 accumulation, stored as float32."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D matrices")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise ValueError("matmul produced non-finite entries")
    return freeze(out)


def frob_norm_sq(m):
    """Sum of squared entries, accumulated in float64."""
    d = np.asarray(m, dtype=np.float64)
    return float(np.dot(d.ravel(), d.ravel()))


def gaussian_matrix(rng, rows, cols, stddev=1.0):
    """I.i.d. Gaussian entries; deterministic under a fixed generator state."""
    if rows < 1 or cols < 1:
        raise ShapeError("gaussian_matrix needs rows, cols >= 1")
    if stddev <= 0:
        raise ValueError("stddev must be positive")
    out = rng.standard_normal((rows, cols), dtype=np.float64) * stddev
    return freeze(out.astype(np.float32))


def orthogonalize_with_flag(m, rng=None):
    """Gram-Schmidt with a re-orthogonalization pass (projections applied
    twice per column, vectorized against all previous columns).

    Columns whose residual norm collapses below tolerance are replaced by a
    fresh random unit vector orthogonal to the previous columns; the number
    of replacements is returned as the degeneracy flag. Requires
    rows >= cols. Computation runs in float64; the result is float32.
    """
    if m.ndim != 2:
        raise ShapeError("orthogonalize expects a 2-D matrix")
    rows, cols = m.shape
    if rows < cols:
        raise ShapeError(f"orthogonalize needs rows >= cols, got {m.shape}")
    if rng is None:
        rng = make_rng(0x0A17)

    def project_out(prev, col):
        for _ in range(2):
            col = col - prev @ (prev.T @ col)
        return col

    q = np.array(m, dtype=np.float64)
    replaced = 0
    for j in range(cols):
        prev = q[:, :j]
        col = project_out(prev, q[:, j]) if j else q[:, j]
        nsq = np.dot(col, col)
        while nsq < DEGENERATE_COL_TOL:
            col = rng.standard_normal(rows)
            if j:
                col = project_out(prev, col)
            nsq = np.dot(col, col)
            replaced += 1
        q[:, j] = col / np.sqrt(nsq)
    return freeze(q.astype(np.float32)), replaced


def orthogonalize(m, rng=None):
    q, _ = orthogonalize_with_flag(m, rng)
    return q
