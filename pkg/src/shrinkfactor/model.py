"""Domain types and closed-form densities shared by the EM and Gibbs engines.

Orientation is fixed throughout the package: ``Y`` is n x p (samples x
features), ``X`` is n x K and ``Lambda`` is K x p.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import betaln, gammaln

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    """Raised for invalid parameters or inputs (domain errors)."""


class NumericalError(ArithmeticError):
    """Raised when a linear system is too degenerate to solve reliably."""


@dataclass(frozen=True)
class Hyperparameters:
    """Prior constants, thresholds and iteration limits.

    The shape constants ``a..f`` and the global rate ``nu`` parameterize the
    three levels of the shrinkage hierarchy; ``alpha`` and ``beta`` are the
    beta prior on the sparse/dense mixing weight.  Defaults give the
    horseshoe at every level with a uniform mixing prior.
    """

    a: float = 0.5
    b: float = 0.5
    c: float = 0.5
    d: float = 0.5
    e: float = 0.5
    f: float = 0.5
    nu: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    k_init: int = 50
    zero_threshold: float = 1e-10
    z_cutoff: float = 0.5
    stable_window: int = 20
    max_iters: int = 3000
    psi_floor: float = 1e-6
    # MAP shape sums <= 1 give a zero mode; use the conditional mean instead.
    use_mean_fallback: bool = True
    # Include the posterior variance of X in the residual-variance update.
    psi_variance_term: bool = True

    def __post_init__(self):
        for name in ("a", "b", "c", "d", "e", "f", "nu", "alpha", "beta",
                     "zero_threshold", "psi_floor"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ModelError(f"hyperparameter {name} must be positive, got {value}")
        if not 0.0 < self.z_cutoff < 1.0:
            raise ModelError(f"z_cutoff must lie in (0, 1), got {self.z_cutoff}")
        for name in ("k_init", "stable_window", "max_iters"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ModelError(f"{name} must be a positive integer, got {value}")

    @property
    def floor(self) -> float:
        """Lower clamp applied to variance-like modes (theta, phi)."""
        return self.zero_threshold * 1e-2

    def to_dict(self) -> dict:
        return {fld.name: getattr(self, fld.name) for fld in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "Hyperparameters":
        known = {fld.name for fld in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass(frozen=True)
class DataMatrix:
    """An n x p observation matrix with optional labels."""

    values: np.ndarray
    row_labels: Optional[Sequence[str]] = None
    col_labels: Optional[Sequence[str]] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ModelError(f"data matrix must be 2-D, got shape {values.shape}")
        n, p = values.shape
        if n < 2 or p < 2:
            raise ModelError(f"data matrix needs n >= 2 and p >= 2, got {n} x {p}")
        bad = ~np.isfinite(values)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ModelError(f"non-finite entry at row {i}, column {j}")
        if self.row_labels is not None and len(self.row_labels) != n:
            raise ModelError("row label count does not match the number of rows")
        if self.col_labels is not None and len(self.col_labels) != p:
            raise ModelError("column label count does not match the number of columns")
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FactorState:
    X: np.ndarray
    Lambda: np.ndarray
    Psi: np.ndarray

    @property
    def K(self) -> int:
        return self.Lambda.shape[0]


@dataclass
class ShrinkageState:
    """Hierarchy parameters for K factors.

    ``rho[k]`` is the posterior probability that factor k is sparse.
    ``pi_a``/``pi_b`` are the beta parameters whose expected logs give
    ``ln_pi`` and ``ln_one_minus_pi``.
    """

    theta: np.ndarray
    delta: np.ndarray
    phi: np.ndarray
    tau: np.ndarray
    eta: float
    gamma: float
    rho: np.ndarray
    ln_pi: float = math.log(0.5)
    ln_one_minus_pi: float = math.log(0.5)
    pi_a: float = 1.0
    pi_b: float = 1.0

    @classmethod
    def initial(cls, K: int, p: int, rho: float = 0.5) -> "ShrinkageState":
        return cls(
            theta=np.ones((K, p)),
            delta=np.ones((K, p)),
            phi=np.ones(K),
            tau=np.ones(K),
            eta=1.0,
            gamma=1.0,
            rho=np.full(K, rho),
        )

    def select(self, keep: np.ndarray) -> "ShrinkageState":
        """Return the state restricted to the factor indices in ``keep``."""
        return replace(
            self,
            theta=self.theta[keep],
            delta=self.delta[keep],
            phi=self.phi[keep],
            tau=self.tau[keep],
            rho=self.rho[keep],
        )

    def copy(self) -> "ShrinkageState":
        return replace(
            self,
            theta=self.theta.copy(),
            delta=self.delta.copy(),
            phi=self.phi.copy(),
            tau=self.tau.copy(),
            rho=self.rho.copy(),
        )


@dataclass(frozen=True)
class SimTruth:
    X: np.ndarray
    Lambda: np.ndarray
    F: np.ndarray
    Omega: np.ndarray
    epsilon: np.ndarray
    noise_sd: float
    support_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def _check_positive(**params):
    for name, value in params.items():
        if not np.all(np.asarray(value) > 0):
            raise ModelError(f"{name} must be positive, got {value}")


def tpb_logpdf(x, a, b, phi):
    """Log density of the three-parameter beta distribution on (0, 1)."""
    _check_positive(a=a, b=b, phi=phi)
    x = np.asarray(x, dtype=float)
    if np.any((x <= 0) | (x >= 1)):
        raise ModelError("tpb density is defined for x in (0, 1)")
    out = (
        -betaln(a, b)
        + b * np.log(phi)
        + (b - 1) * np.log(x)
        + (a - 1) * np.log1p(-x)
        - (a + b) * np.log1p((phi - 1) * x)
    )
    return out if out.ndim else float(out)


def tpb_pdf(x, a, b, phi):
    """Three-parameter beta density.

    f(x; a, b, phi) = phi^b x^(b-1) (1-x)^(a-1) {1 + (phi-1) x}^-(a+b) / B(a, b)

    With ``phi == 1`` this is the Beta(b, a) density.
    """
    return np.exp(tpb_logpdf(x, a, b, phi))


def inv_beta_logpdf(x, alpha, beta):
    _check_positive(alpha=alpha, beta=beta)
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ModelError("inverse beta density is defined for x > 0")
    out = (alpha - 1) * np.log(x) - (alpha + beta) * np.log1p(x) - betaln(alpha, beta)
    return out if out.ndim else float(out)


def inv_beta_pdf(x, alpha, beta):
    """Inverse beta (beta prime) density x^(alpha-1) (1+x)^(-alpha-beta) / B(alpha, beta)."""
    return np.exp(inv_beta_logpdf(x, alpha, beta))


def gig_mode(order, rate2, quad):
    """Mode of the density proportional to x^(order-1) exp(-(rate2*x + quad/x)/2).

    Vectorized over all arguments.  Returns 0 where ``order <= 1`` and
    ``quad == 0`` (the density is then maximized at the boundary).
    """
    order = np.asarray(order, dtype=float)
    rate2 = np.asarray(rate2, dtype=float)
    quad = np.asarray(quad, dtype=float)
    if np.any(rate2 <= 0):
        raise ModelError("gig_mode requires rate2 > 0")
    if np.any(quad < 0):
        raise ModelError("gig_mode requires quad >= 0")
    h = order - 1.0
    root = np.sqrt(h * h + rate2 * quad)
    # h + root cancels badly when h << 0; use the conjugate form there.
    with np.errstate(divide="ignore", invalid="ignore"):
        stable = np.where(h >= 0, (h + root) / rate2, quad / (root - h))
    stable = np.where((h < 0) & (quad == 0), 0.0, stable)
    return stable if stable.ndim else float(stable)


def gig_logkernel(x, order, rate2, quad):
    """Unnormalized GIG log density; used by tests and diagnostics."""
    x = np.asarray(x, dtype=float)
    return (order - 1) * np.log(x) - 0.5 * (rate2 * x + quad / x)


def normal_logpdf(x, var):
    """Log N(x | 0, var) elementwise."""
    return -0.5 * (np.log(2 * np.pi * var) + np.square(x) / var)


def gamma_logpdf(x, shape, rate):
    """Log Ga(x | shape, rate) elementwise (rate parameterization)."""
    return shape * np.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x
