"""Small dense-math helpers shared by the cell, the grid and the solvers.

Everything is float64. Matrices and vectors are plain numpy arrays; the
helpers here only add the shape checks and the fixed-order reductions the
rest of the package relies on for reproducibility.
"""

from __future__ import annotations

from typing import Sequence as Seq

import numpy as np

from .errors import ShapeError

DenseMatrix = np.ndarray
DenseVector = np.ndarray


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> DenseMatrix:
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise ShapeError(f"expected a {rows}x{cols} matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def as_vector(values, dim: int | None = None) -> DenseVector:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-d vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ShapeError(f"expected dimension {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def affine(W: DenseMatrix, x: np.ndarray, b: DenseVector) -> np.ndarray:
    """W @ x + b, broadcasting over leading batch axes of ``x``."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"affine: W{W.shape}, x{x.shape}, b{b.shape} do not conform")
    return x @ W.T + b


def sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |v| and one ufunc in the hot loop
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(v, dtype=np.float64)))


def tanh_act(v: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(v, dtype=np.float64))


def tree_sum(terms: Seq):
    """Pairwise sum in a fixed order that depends only on ``len(terms)``.

    Used for every reduction that has to be reproducible across worker
    counts: the bracketing never changes with how the terms were produced.
    """
    terms = list(terms)
    if not terms:
        raise ValueError("tree_sum of an empty list")
    while len(terms) > 1:
        nxt = [terms[i] + terms[i + 1] for i in range(0, len(terms) - 1, 2)]
        if len(terms) % 2:
            nxt.append(terms[-1])
        terms = nxt
    return terms[0]


def squared_terms(seq: np.ndarray, lo: int = 1, hi: int | None = None) -> list[float]:
    """Per-index squared norms of ``seq[lo..hi]`` (inclusive)."""
    hi = seq.shape[0] - 1 if hi is None else hi
    return [float(np.sum(np.square(seq[t]))) for t in range(lo, hi + 1)]


def seq_l2_norm(seq: np.ndarray) -> float:
    """l2 norm over every entry at time indices >= 1; index 0 is the anchor."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.shape[0] <= 1:
        return 0.0
    return float(np.sqrt(tree_sum(squared_terms(seq))))


def dft_magnitudes(signal) -> np.ndarray:
    """|DFT| for wavenumbers 0..N//2 of a real signal (along axis 0)."""
    s = np.asarray(signal, dtype=np.float64)
    if s.shape[0] < 2:
        raise ValueError("dft_magnitudes needs at least two samples")
    return np.abs(np.fft.rfft(s, axis=0))
