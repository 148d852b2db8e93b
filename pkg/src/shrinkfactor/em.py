"""MAP-EM for the sparse/dense mixture factor model.

One iteration runs the E-step over the factors X and the sparse/dense
indicators Z, then coordinate M-step updates for the loadings and every
level of the shrinkage hierarchy.  Factors whose loading rows collapse
below ``zero_threshold`` are pruned as the fit proceeds; the fit stops once
the number of non-zero loadings has been stable for ``stable_window``
iterations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import betaln, digamma, expit

from .model import (
    DataMatrix,
    FactorState,
    Hyperparameters,
    ModelError,
    NumericalError,
    ShrinkageState,
    gamma_logpdf,
    gig_mode,
    normal_logpdf,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EStepResult:
    mean_x: np.ndarray  # n x K
    cov_x: np.ndarray  # K x K, shared by all samples
    second_moment_sums: np.ndarray  # K x K, sum_i <x_i x_i^T>
    cross_products: np.ndarray  # K x p, sum_i <x_ik> y_ij


@dataclass(frozen=True)
class FitReport:
    factor_state: FactorState
    shrinkage_state: ShrinkageState
    iterations: int
    nonzero_trace: Tuple[int, ...]
    objective_trace: Tuple[float, ...]
    converged: bool
    seed: int = 0
    # (iteration, original factor index) for every pruned factor
    pruned: Tuple[Tuple[int, int], ...] = ()
    factor_ids: Tuple[int, ...] = ()

    @property
    def final_objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else -math.inf


def _values(Y) -> np.ndarray:
    return Y.values if isinstance(Y, DataMatrix) else np.asarray(Y, dtype=float)


def e_step_x(Y, Lambda: np.ndarray, Psi: np.ndarray) -> EStepResult:
    """Gaussian posterior of each row of X given the loadings.

    cov_x = (Lambda Psi^-1 Lambda^T + I)^-1 and the posterior mean of row i
    is cov_x Lambda Psi^-1 y_i.
    """
    Yv = _values(Y)
    n, p = Yv.shape
    K = Lambda.shape[0]
    if Lambda.shape[1] != p or Psi.shape != (p,):
        raise ModelError(f"shape mismatch: Y {Yv.shape}, Lambda {Lambda.shape}, Psi {Psi.shape}")
    if K == 0:
        return EStepResult(np.zeros((n, 0)), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, p)))
    scaled = Lambda / Psi  # Lambda Psi^-1
    precision = scaled @ Lambda.T + np.eye(K)
    if not np.all(np.isfinite(precision)):
        raise NumericalError("non-finite posterior precision for X; loadings degenerate")
    try:
        chol = cho_factor(precision, lower=True)
    except LinAlgError as exc:
        raise NumericalError("posterior precision for X is not positive definite") from exc
    cov = cho_solve(chol, np.eye(K))
    cov = 0.5 * (cov + cov.T)
    if np.linalg.cond(precision) > 1e14:
        raise NumericalError("posterior precision for X is numerically singular")
    mean = (Yv @ scaled.T) @ cov
    second = n * cov + mean.T @ mean
    cross = mean.T @ Yv
    return EStepResult(mean, cov, second, cross)


def _sparse_dense_loglik(Lambda, theta, delta, phi, hyper: Hyperparameters):
    """Per-factor log-likelihood of the loadings under each mixture branch."""
    phi_col = phi[:, None]
    sparse = (
        normal_logpdf(Lambda, theta)
        + gamma_logpdf(theta, hyper.a, delta)
        + gamma_logpdf(delta, hyper.b, phi_col)
    ).sum(axis=1)
    dense = normal_logpdf(Lambda, phi_col).sum(axis=1)
    return sparse, dense


def z_log_odds(Lambda, theta, delta, phi, ln_pi, ln_one_minus_pi, hyper: Hyperparameters):
    """Log odds of the sparse branch for each factor."""
    sparse, dense = _sparse_dense_loglik(Lambda, theta, delta, phi, hyper)
    with np.errstate(invalid="ignore"):
        odds = sparse + ln_pi - dense - ln_one_minus_pi
    # -inf - (-inf) style NaNs cannot arise from finite states; guard anyway
    return np.nan_to_num(odds, nan=0.0)


def e_step_z(Lambda, theta, delta, phi, ln_pi, ln_one_minus_pi, hyper: Hyperparameters) -> np.ndarray:
    """Posterior probability that each factor is sparse, computed in log space."""
    for name, arr in (("theta", theta), ("delta", delta), ("phi", phi)):
        if np.any(np.asarray(arr) <= 0):
            raise ModelError(f"{name} must be positive")
    return expit(z_log_odds(Lambda, theta, delta, phi, ln_pi, ln_one_minus_pi, hyper))


def m_step_lambda(estep: EStepResult, Y, state: FactorState, shrink: ShrinkageState) -> np.ndarray:
    """Coordinate update of each loading row, sweeping factors in order.

    Each row uses the freshest values of the rows already updated in this
    sweep.  The prior precision mixes the sparse variance theta and the
    dense variance phi in proportion to rho.
    """
    Lam = np.array(state.Lambda, dtype=float, copy=True)
    K = Lam.shape[0]
    inv_psi = 1.0 / state.Psi
    S = estep.second_moment_sums
    C = estep.cross_products
    for k in range(K):
        others = S[:, k] @ Lam - S[k, k] * Lam[k]
        num = inv_psi * (C[k] - others)
        prior_prec = shrink.rho[k] / shrink.theta[k] + (1.0 - shrink.rho[k]) / shrink.phi[k]
        den = inv_psi * S[k, k] + prior_prec
        with np.errstate(invalid="ignore", divide="ignore"):
            row = np.where(den > 0, num / den, 0.0)
        Lam[k] = row
    return Lam


def m_step_theta(Lambda, delta, a: float, floor: float = 1e-12) -> np.ndarray:
    """Elementwise GIG mode for the local sparse variances."""
    mode = gig_mode(a - 0.5, 2.0 * np.asarray(delta), np.square(Lambda))
    return np.maximum(mode, floor)


def m_step_scale(shape_sum: float, rate_sum, use_mean_fallback: bool = True):
    """Mode of a Ga(shape_sum, rate_sum) conditional, or its mean when the mode is 0.

    Covers delta (a+b, theta+phi), tau (c+d, phi+eta), eta (Kd+e,
    gamma+sum tau) and gamma (e+f, eta+nu).
    """
    rate_sum = np.asarray(rate_sum, dtype=float)
    if np.any(rate_sum <= 0):
        raise ModelError("rate_sum must be positive")
    if shape_sum > 1:
        out = (shape_sum - 1.0) / rate_sum
    elif use_mean_fallback:
        out = shape_sum / rate_sum
    else:
        raise ModelError(f"MAP estimate is zero for shape {shape_sum} <= 1 and fallback is disabled")
    return out if out.ndim else float(out)


def m_step_phi(Lambda_row, delta_row, rho_k: float, tau_k: float,
               hyper: Hyperparameters) -> float:
    """Factor-level variance update mixing the sparse and dense branches.

    Solves chi*phi^2 - 2*h*phi - (1 - rho)*omega = 0 with
    h = p*b*rho + c - 1 - (p/2)(1 - rho) and chi = 2(rho*sum(delta) + tau).
    """
    if tau_k <= 0:
        raise ModelError("tau must be positive")
    Lambda_row = np.asarray(Lambda_row, dtype=float)
    p = Lambda_row.shape[0]
    h = p * hyper.b * rho_k + hyper.c - 1.0 - 0.5 * p * (1.0 - rho_k)
    chi = 2.0 * (rho_k * float(np.sum(delta_row)) + tau_k)
    omega = (1.0 - rho_k) * float(np.sum(np.square(Lambda_row)))
    # the mode of phi^(h) exp(-(chi*phi + omega/phi)/2) is a GIG mode with order h + 1
    return max(float(gig_mode(h + 1.0, chi, omega)), hyper.floor)


def m_step_pi(rho, alpha: float, beta: float) -> Tuple[float, float]:
    """Expected log mixing weights under Beta(sum(rho) + alpha, K - sum(rho) + beta)."""
    rho = np.asarray(rho, dtype=float)
    K = rho.shape[0]
    s = float(rho.sum())
    total = digamma(K + alpha + beta)
    return float(digamma(s + alpha) - total), float(digamma(K - s + beta) - total)


def m_step_psi(Y, estep: EStepResult, Lambda, psi_floor: float,
               variance_term: bool = False) -> np.ndarray:
    """Residual variance per feature, floored at ``psi_floor``."""
    Yv = _values(Y)
    n = Yv.shape[0]
    resid = Yv - estep.mean_x @ Lambda
    psi = np.einsum("ij,ij->j", resid, resid) / n
    if variance_term and Lambda.shape[0]:
        psi = psi + np.einsum("kj,kl,lj->j", Lambda, estep.cov_x, Lambda)
    return np.maximum(psi, psi_floor)


def active_loading_count(Lambda, zero_threshold: float) -> int:
    return int(np.count_nonzero(np.abs(Lambda) > zero_threshold))


def expected_log_posterior(Y, estep: EStepResult, Lambda, Psi, shrink: ShrinkageState,
                           hyper: Hyperparameters, residual: str = "expected") -> float:
    """Expected complete-data log posterior Q, up to an additive constant.

    ``residual='expected'`` uses the full second-moment expectation of the
    squared residuals; ``'plug_in'`` uses the posterior-mean factors only.
    """
    Yv = _values(Y)
    n, p = Yv.shape
    K = Lambda.shape[0]
    if residual == "expected":
        rss = (
            np.einsum("ij,ij->j", Yv, Yv)
            - 2.0 * np.einsum("kj,kj->j", Lambda, estep.cross_products)
            + np.einsum("kj,kl,lj->j", Lambda, estep.second_moment_sums, Lambda)
        )
    elif residual == "plug_in":
        resid = Yv - estep.mean_x @ Lambda
        rss = np.einsum("ij,ij->j", resid, resid)
    else:
        raise ModelError(f"unknown residual mode {residual!r}")
    q = float(np.sum(-0.5 * n * np.log(2 * np.pi * Psi) - rss / (2.0 * Psi)))
    q -= 0.5 * float(np.trace(estep.second_moment_sums)) + 0.5 * n * K * math.log(2 * np.pi)
    if K:
        rho = shrink.rho
        sparse, dense = _sparse_dense_loglik(Lambda, shrink.theta, shrink.delta, shrink.phi, hyper)
        q += float(np.sum(rho * sparse + (1.0 - rho) * dense))
        q += float(np.sum(rho * shrink.ln_pi + (1.0 - rho) * shrink.ln_one_minus_pi))
        q += float(np.sum(gamma_logpdf(shrink.phi, hyper.c, shrink.tau)))
        q += float(np.sum(gamma_logpdf(shrink.tau, hyper.d, shrink.eta)))
    q += float(gamma_logpdf(shrink.eta, hyper.e, shrink.gamma))
    q += float(gamma_logpdf(shrink.gamma, hyper.f, hyper.nu))
    # E[ln Beta(pi | alpha, beta)] under the current expected logs
    q += (hyper.alpha - 1) * shrink.ln_pi + (hyper.beta - 1) * shrink.ln_one_minus_pi
    q -= float(betaln(hyper.alpha, hyper.beta))
    return q


def _bernoulli_entropy(rho):
    rho = np.clip(rho, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(rho > 0, rho * np.log(rho), 0.0)
              + np.where(rho < 1, (1 - rho) * np.log1p(-rho), 0.0))
    return float(np.sum(h))


def _beta_entropy(a: float, b: float) -> float:
    return float(
        betaln(a, b) - (a - 1) * digamma(a) - (b - 1) * digamma(b)
        + (a + b - 2) * digamma(a + b)
    )


def objective(Y, estep: EStepResult, Lambda, Psi, shrink: ShrinkageState,
              hyper: Hyperparameters) -> float:
    """Q plus the entropies of the latent posteriors over X, Z and pi.

    This is the quantity each full sweep cannot decrease (fallback off,
    residual variance including the posterior variance of X).
    """
    n = _values(Y).shape[0]
    q = expected_log_posterior(Y, estep, Lambda, Psi, shrink, hyper)
    K = Lambda.shape[0]
    if K:
        _, logdet = np.linalg.slogdet(estep.cov_x)
        q += 0.5 * n * (K * math.log(2 * np.pi * np.e) + logdet)
        q += _bernoulli_entropy(shrink.rho)
    q += _beta_entropy(shrink.pi_a, shrink.pi_b)
    return q


@dataclass
class _Work:
    Lambda: np.ndarray
    Psi: np.ndarray
    shrink: ShrinkageState
    ids: np.ndarray
    pruned: List[Tuple[int, int]] = field(default_factory=list)


def initialize(Y, hyper: Hyperparameters, seed: int, K: int | None = None) -> _Work:
    """Overdispersed neutral start: random loadings scaled by column sd."""
    Yv = _values(Y)
    n, p = Yv.shape
    K = hyper.k_init if K is None else K
    rng = np.random.default_rng(seed)
    col_var = Yv.var(axis=0, ddof=1)
    constant = col_var <= 0
    if constant.any():
        logger.warning("%d constant column(s) in Y; their residual variance is floored",
                       int(constant.sum()))
    col_sd = np.sqrt(np.maximum(col_var, 0.0))
    Lambda = rng.normal(0.0, 0.5, size=(K, p)) * col_sd
    Psi = np.maximum(col_var, hyper.psi_floor)
    return _Work(Lambda, Psi, ShrinkageState.initial(K, p), np.arange(K))


def em_iteration(Y, work: _Work, hyper: Hyperparameters, iteration: int = 0,
                 prune: bool = True) -> EStepResult:
    """One full sweep; updates ``work`` in place and returns the E-step used."""
    sh = work.shrink
    estep = e_step_x(Y, work.Lambda, work.Psi)
    sh.rho = e_step_z(work.Lambda, sh.theta, sh.delta, sh.phi, sh.ln_pi, sh.ln_one_minus_pi, hyper)
    fstate = FactorState(estep.mean_x, work.Lambda, work.Psi)
    Lambda = m_step_lambda(estep, Y, fstate, sh)

    if prune:
        dead = np.all(np.abs(Lambda) <= hyper.zero_threshold, axis=1)
        if dead.any():
            keep = np.flatnonzero(~dead)
            for k in np.flatnonzero(dead):
                work.pruned.append((iteration, int(work.ids[k])))
            Lambda = Lambda[keep]
            work.ids = work.ids[keep]
            sh = sh.select(keep)
            estep = EStepResult(
                estep.mean_x[:, keep],
                estep.cov_x[np.ix_(keep, keep)],
                estep.second_moment_sums[np.ix_(keep, keep)],
                estep.cross_products[keep],
            )

    fb = hyper.use_mean_fallback
    sh.theta = m_step_theta(Lambda, sh.delta, hyper.a, hyper.floor)
    sh.delta = m_step_scale(hyper.a + hyper.b, sh.theta + sh.phi[:, None], fb)
    sh.phi = np.array([
        m_step_phi(Lambda[k], sh.delta[k], sh.rho[k], sh.tau[k], hyper)
        for k in range(Lambda.shape[0])
    ])
    K = Lambda.shape[0]
    sh.tau = m_step_scale(hyper.c + hyper.d, sh.phi + sh.eta, fb) * np.ones(K)
    sh.eta = m_step_scale(K * hyper.d + hyper.e, sh.gamma + sh.tau.sum(), fb)
    sh.gamma = m_step_scale(hyper.e + hyper.f, sh.eta + hyper.nu, fb)
    sh.ln_pi, sh.ln_one_minus_pi = m_step_pi(sh.rho, hyper.alpha, hyper.beta)
    sh.pi_a = float(sh.rho.sum()) + hyper.alpha
    sh.pi_b = K - float(sh.rho.sum()) + hyper.beta
    work.Psi = m_step_psi(Y, estep, Lambda, hyper.psi_floor, hyper.psi_variance_term)
    work.Lambda = Lambda
    work.shrink = sh
    return estep


def fit_em(Y, hyper: Hyperparameters = Hyperparameters(), seed: int = 0,
           prune: bool = True) -> FitReport:
    """Fit the mixture factor model by MAP-EM.

    Stops when the number of loadings above ``hyper.zero_threshold`` is
    unchanged over the last ``hyper.stable_window`` iterations, or after
    ``hyper.max_iters`` iterations (``converged`` is then False).
    """
    if not isinstance(Y, DataMatrix):
        Y = DataMatrix(np.asarray(Y, dtype=float))
    work = initialize(Y, hyper, seed)
    counts: List[int] = []
    objectives: List[float] = []
    converged = False
    it = 0
    for it in range(1, hyper.max_iters + 1):
        em_iteration(Y, work, hyper, iteration=it, prune=prune)
        counts.append(active_loading_count(work.Lambda, hyper.zero_threshold))
        post = e_step_x(Y, work.Lambda, work.Psi)
        objectives.append(objective(Y, post, work.Lambda, work.Psi, work.shrink, hyper))
        window = counts[-hyper.stable_window:]
        if len(counts) >= hyper.stable_window and min(window) == max(window):
            converged = True
            break
    if not converged:
        logger.info("EM stopped at max_iters=%d without a stable loading count", hyper.max_iters)
    final = e_step_x(Y, work.Lambda, work.Psi)
    state = FactorState(final.mean_x, work.Lambda, work.Psi)
    return FitReport(
        factor_state=state,
        shrinkage_state=work.shrink,
        iterations=it,
        nonzero_trace=tuple(counts),
        objective_trace=tuple(objectives),
        converged=converged,
        seed=seed,
        pruned=tuple(work.pruned),
        factor_ids=tuple(int(i) for i in work.ids),
    )
