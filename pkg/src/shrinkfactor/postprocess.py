"""Turning fitted states into reportable artifacts.

Sparse/dense labels, thresholded feature clusters, per-factor variance
explained, residualization against dense factors, principal-component
removal and normal-quantile projection of factors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata

from .model import DataMatrix, ModelError

SPARSE = "sparse"
DENSE = "dense"


def _values(Y) -> np.ndarray:
    return Y.values if isinstance(Y, DataMatrix) else np.asarray(Y, dtype=float)


@dataclass(frozen=True)
class FactorSummary:
    labels: Tuple[str, ...]
    supports: Tuple[Tuple[int, ...], ...]
    pve: np.ndarray

    @property
    def support_sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.supports], dtype=int)

    @property
    def total_factors(self) -> int:
        return len(self.labels)

    @property
    def dense_count(self) -> int:
        return sum(label == DENSE for label in self.labels)


def classify_factors(rho, z_cutoff: float = 0.5) -> List[str]:
    """Label factor k sparse when rho_k >= z_cutoff (ties go to sparse)."""
    rho = np.asarray(rho, dtype=float)
    return [SPARSE if r >= z_cutoff else DENSE for r in rho]


def threshold_loadings(Lambda, t: float) -> Tuple[np.ndarray, List[Tuple[int, ...]]]:
    """Zero entries with |value| <= t and list the surviving indices per row."""
    if t < 0:
        raise ModelError("threshold must be non-negative")
    L = np.array(Lambda, dtype=float, copy=True)
    L[np.abs(L) <= t] = 0.0
    supports = [tuple(int(j) for j in np.flatnonzero(row)) for row in L]
    return L, supports


def pve(X, Lambda, Y) -> np.ndarray:
    """||X[:, k] Lambda[k]||_F^2 / ||Yc||_F^2 with Yc the column-centered data.

    The rank-one Frobenius mass factorizes as ||x_k||^2 ||lambda_k||^2.
    """
    Yv = _values(Y)
    Yc = Yv - Yv.mean(axis=0)
    total = float(np.sum(Yc * Yc))
    if total <= 0:
        raise ModelError("column-centered Y has zero norm; variance explained is undefined")
    X = np.asarray(X, dtype=float)
    Lambda = np.asarray(Lambda, dtype=float)
    mass = np.sum(X * X, axis=0) * np.sum(Lambda * Lambda, axis=1)
    return mass / total


def residualize(Y, F, Omega) -> DataMatrix:
    """Y - F Omega."""
    Yv = _values(Y)
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Omega = np.atleast_2d(np.asarray(Omega, dtype=float))
    if F.shape[1] == 0:
        return DataMatrix(Yv.copy())
    if F.shape != (Yv.shape[0], Omega.shape[0]) or Omega.shape[1] != Yv.shape[1]:
        raise ModelError(f"shapes do not chain: Y {Yv.shape}, F {F.shape}, Omega {Omega.shape}")
    return DataMatrix(Yv - F @ Omega)


def pc_scores(Y, m: int) -> np.ndarray:
    """Top-m sample-space principal directions of column-centered Y (n x m, orthonormal)."""
    Yv = _values(Y)
    Yc = Yv - Yv.mean(axis=0)
    U, s, _ = np.linalg.svd(Yc, full_matrices=False)
    tol = s.max(initial=0.0) * max(Yc.shape) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    if m > rank:
        raise ModelError(f"cannot remove {m} components from data of rank {rank}")
    return U[:, :m]


def remove_pcs(Y, m: int) -> DataMatrix:
    """Residuals of every column of centered Y regressed on its top-m PC scores."""
    if int(m) != m or m < 1:
        raise ModelError("m must be a positive integer")
    Yv = _values(Y)
    if m >= min(Yv.shape):
        raise ModelError(f"m={m} must be below min(n, p)={min(Yv.shape)}")
    U = pc_scores(Yv, m)
    Yc = Yv - Yv.mean(axis=0)
    return DataMatrix(Yc - U @ (U.T @ Yc))


def quantile_normalize_factor(x) -> np.ndarray:
    """Average ranks mapped to standard normal quantiles at (r - 0.5) / n."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ModelError("expected a non-empty vector")
    r = rankdata(x, method="average")
    return norm.ppf((r - 0.5) / x.size)


def covariate_correlation(X_dense, C) -> np.ndarray:
    """Signed Pearson correlation of every factor column with every covariate column."""
    A = np.asarray(X_dense, dtype=float)
    B = np.asarray(C, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.shape[0] != B.shape[0]:
        raise ModelError(f"row counts differ: {A.shape[0]} vs {B.shape[0]}")
    Ac = A - A.mean(axis=0)
    Bc = B - B.mean(axis=0)
    na = np.sqrt(np.sum(Ac * Ac, axis=0))
    nb = np.sqrt(np.sum(Bc * Bc, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        R = (Ac.T @ Bc) / np.outer(na, nb)
    return np.clip(np.nan_to_num(R, nan=0.0), -1.0, 1.0)


def summarize_factors(X, Lambda, rho, Y, z_cutoff: float = 0.5,
                      zero_threshold: float = 1e-10) -> FactorSummary:
    labels = classify_factors(rho, z_cutoff)
    _, supports = threshold_loadings(Lambda, zero_threshold)
    return FactorSummary(tuple(labels), tuple(supports), pve(X, Lambda, Y))


def support_histogram(sizes: Sequence[int], bin_width: int = 5) -> List[Tuple[int, int, int]]:
    """(lower, upper, count) rows covering 0..max(sizes) in bins of ``bin_width``."""
    sizes = np.asarray(sizes, dtype=int)
    if sizes.size == 0:
        return []
    top = int(sizes.max())
    edges = np.arange(0, top + bin_width + 1, bin_width)
    counts, _ = np.histogram(sizes, bins=edges)
    return [(int(lo), int(hi) - 1, int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
