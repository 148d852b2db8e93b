"""Stability statistics for comparing two fitted matrices.

``r_s`` compares sparse loading matrices through absolute row correlations
and is invariant to label switching and row scaling.  ``r_d`` compares
dense matrices through their feature Gram matrices, which also makes it
invariant to rotation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .model import ModelError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SparseStabilityResult:
    r_s: float
    correlation_matrix: np.ndarray
    row_terms: np.ndarray
    col_terms: np.ndarray
    zero_variance_rows: Tuple[Tuple[int, ...], Tuple[int, ...]] = ((), ())


@dataclass(frozen=True)
class DenseStabilityResult:
    r_d: float
    dropped_row_indices: Tuple[Tuple[int, ...], Tuple[int, ...]] = ((), ())


def _check_pair(L1, L2):
    L1 = np.atleast_2d(np.asarray(L1, dtype=float))
    L2 = np.atleast_2d(np.asarray(L2, dtype=float))
    if L1.shape[1] != L2.shape[1]:
        raise ModelError(f"column counts differ: {L1.shape[1]} vs {L2.shape[1]}")
    if L1.shape[1] < 2:
        raise ModelError("need at least two columns")
    return L1, L2


def _standardize_rows(M):
    centered = M - M.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", centered, centered))
    degenerate = norms <= 1e-300
    out = np.zeros_like(centered)
    out[~degenerate] = centered[~degenerate] / norms[~degenerate, None]
    return out, degenerate


def abs_correlation_matrix(L1, L2) -> np.ndarray:
    """|Pearson correlation| between every row of ``L1`` and every row of ``L2``.

    Zero-variance rows get correlation 0 and a warning.
    """
    L1, L2 = _check_pair(L1, L2)
    Z1, bad1 = _standardize_rows(L1)
    Z2, bad2 = _standardize_rows(L2)
    if bad1.any() or bad2.any():
        logger.warning("zero-variance rows: %s / %s", np.flatnonzero(bad1), np.flatnonzero(bad2))
    return np.clip(np.abs(Z1 @ Z2.T), 0.0, 1.0)


def _penalized_max(sigma: np.ndarray, exclude_argmax: bool) -> np.ndarray:
    """Row-wise max minus the mass of above-mean entries spread over (ncol - 1)."""
    n_other = sigma.shape[1]
    best = sigma.max(axis=1)
    above = sigma > sigma.mean(axis=1, keepdims=True)
    if exclude_argmax:
        rows = np.arange(sigma.shape[0])
        above[rows, sigma.argmax(axis=1)] = False
    penalty = np.where(above, sigma, 0.0).sum(axis=1) / (n_other - 1)
    return best - penalty


def sparse_stability(L1, L2, literal: bool = False) -> SparseStabilityResult:
    """r_s between two sparse matrices sharing the same feature columns.

    Each row (and column) of the correlation matrix scores its maximum minus
    the average of the other above-mean entries, so that a one-to-one match
    scores 1 and factor splitting is penalized.  The maximal entry itself is
    left out of the penalty; ``literal=True`` includes it.
    """
    L1, L2 = _check_pair(L1, L2)
    K1, K2 = L1.shape[0], L2.shape[0]
    if K1 < 2 or K2 < 2:
        raise ModelError(f"r_s needs at least two rows in each matrix, got {K1} and {K2}")
    sigma = abs_correlation_matrix(L1, L2)
    row_terms = _penalized_max(sigma, not literal)
    col_terms = _penalized_max(sigma.T, not literal)
    r_s = row_terms.sum() / (2 * K1) + col_terms.sum() / (2 * K2)
    bad = (
        tuple(int(i) for i in np.flatnonzero(np.ptp(L1, axis=1) == 0)),
        tuple(int(i) for i in np.flatnonzero(np.ptp(L2, axis=1) == 0)),
    )
    return SparseStabilityResult(float(r_s), sigma, row_terms, col_terms, bad)


def scale_rows(M) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Center each row and divide by its sample sd (ddof=1); drop constant rows."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] < 2:
        raise ModelError("need at least two columns to scale rows")
    centered = M - M.mean(axis=1, keepdims=True)
    sd = np.sqrt(np.einsum("ij,ij->i", centered, centered) / (M.shape[1] - 1))
    keep = sd > 1e-12 * np.maximum(1.0, np.abs(M).max(axis=1))
    dropped = tuple(int(i) for i in np.flatnonzero(~keep))
    if M.shape[0] and not keep.any():
        raise ModelError("every row has zero variance")
    return centered[keep] / sd[keep, None], dropped


def gram_trace_distance(M1, M2) -> float:
    """Tr((M1^T M1 - M2^T M2)^2) through K x K Gram blocks."""
    A = M1 @ M1.T
    B = M2 @ M2.T
    C = M1 @ M2.T
    return float(np.sum(A * A) + np.sum(B * B) - 2.0 * np.sum(C * C))


def dense_stability(M1, M2) -> DenseStabilityResult:
    """r_d = Tr((M1^T M1 - M2^T M2)^2) / p^2 after row standardization."""
    M1, M2 = _check_pair(M1, M2)
    S1, drop1 = scale_rows(M1)
    S2, drop2 = scale_rows(M2)
    p = M1.shape[1]
    value = max(gram_trace_distance(S1, S2), 0.0) / p**2
    return DenseStabilityResult(value, (drop1, drop2))
