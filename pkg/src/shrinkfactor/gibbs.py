"""Gibbs sampler for the sparse/dense mixture factor model.

A systematic scan X -> Z -> Lambda -> theta -> delta -> phi -> tau -> eta
-> gamma -> pi -> Psi.  Dense factors carry the local parameters (theta,
delta) under a fixed pseudo-prior, Ga(theta | a, delta) Ga(delta | b, nu),
so that the chain targets a proper joint distribution; the sparse-branch
conditionals are unchanged by this.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy.special import expit

from .em import e_step_x, initialize, _values
from .model import (
    DataMatrix,
    Hyperparameters,
    ModelError,
    gamma_logpdf,
    normal_logpdf,
)

logger = logging.getLogger(__name__)

_CEILING = 1e12
_TINY = 1e-300


@dataclass(frozen=True)
class GibbsConfig:
    n_iters: int = 2000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0
    chain: int = 0
    sample_psi: bool = True
    trace: bool = False

    def __post_init__(self):
        if self.n_iters < 1 or self.thin < 1:
            raise ModelError("n_iters and thin must be positive")
        if not 0 <= self.burn_in < self.n_iters:
            raise ModelError("burn_in must lie in [0, n_iters)")

    @property
    def n_retained(self) -> int:
        return len(range(self.burn_in, self.n_iters, self.thin))


@dataclass
class GibbsState:
    X: np.ndarray
    Lambda: np.ndarray
    Psi: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    delta: np.ndarray
    phi: np.ndarray
    tau: np.ndarray
    eta: float
    gamma: float
    pi: float


@dataclass(frozen=True)
class ChainSummary:
    mean: Dict[str, np.ndarray]
    var: Dict[str, np.ndarray]
    z_frequency: np.ndarray
    n_retained: int
    clamp_counts: Dict[str, int]
    traces: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def Lambda(self) -> np.ndarray:
        return self.mean["Lambda"]

    def active_factors(self, z_score: float = 3.0) -> np.ndarray:
        """Factors with at least one loading whose posterior mean exceeds
        ``z_score`` posterior standard deviations."""
        sd = np.sqrt(self.var["Lambda"])
        with np.errstate(divide="ignore", invalid="ignore"):
            score = np.where(sd > 0, np.abs(self.Lambda) / sd, np.inf * (self.Lambda != 0))
        if score.size == 0:
            return np.zeros(0, dtype=int)
        return np.flatnonzero(np.nan_to_num(score, nan=0.0).max(axis=1) > z_score)


# ---------------------------------------------------------------------------
# generalized inverse Gaussian variates


def _devroye_log_gig(lam, omega, rng):
    """Log-scale draws for the two-parameter GIG(lam >= 0, omega > 0).

    Rejection from a three-piece envelope on the log scale (Devroye 2014).
    """
    lam = np.asarray(lam, dtype=float)
    omega = np.asarray(omega, dtype=float)
    # sqrt(omega^2 + lam^2) - lam without cancellation
    alpha = omega**2 / (np.hypot(omega, lam) + lam)

    def psi(x):
        return -alpha * (np.cosh(x) - 1.0) - lam * (np.expm1(x) - x)

    def dpsi(x):
        return -alpha * np.sinh(x) - lam * np.expm1(x)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        x = -psi(1.0)
        t = np.where(
            (x >= 0.5) & (x <= 2.0), 1.0,
            np.where(x > 2.0, np.sqrt(2.0 / (alpha + lam)), np.log(4.0 / (alpha + 2.0 * lam))),
        )
        x = -psi(-1.0)
        s_log = np.log1p(1.0 / alpha + np.sqrt(1.0 / alpha**2 + 2.0 / alpha))
        s_small = np.where(lam > 0, np.minimum(1.0 / lam, s_log), s_log)
        s = np.where(
            (x >= 0.5) & (x <= 2.0), 1.0,
            np.where(x > 2.0, np.sqrt(4.0 / (alpha * np.cosh(1.0) + lam)), s_small),
        )
        eta = -psi(t)
        zeta = -dpsi(t)
        theta = -psi(-s)
        xi = dpsi(-s)
        p = 1.0 / xi
        r = 1.0 / zeta
        td = t - r * eta
        sd = s - p * theta
        q = td + sd

    out = np.empty(lam.shape)
    pending = np.ones(lam.shape, dtype=bool)
    while pending.any():
        idx = np.flatnonzero(pending)
        U = rng.random(idx.size)
        V = rng.random(idx.size)
        W = rng.random(idx.size)
        pp, qq, rr = p.flat[idx], q.flat[idx], r.flat[idx]
        tdi, sdi = td.flat[idx], sd.flat[idx]
        ti, si = t.flat[idx], s.flat[idx]
        total = pp + qq + rr
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            cand = np.where(
                U < qq / total, -sdi + qq * V,
                np.where(U < (qq + rr) / total, tdi - rr * np.log(V), -sdi + pp * np.log(V)),
            )
            f1 = np.exp(-eta.flat[idx] - zeta.flat[idx] * (cand - ti))
            f2 = np.exp(-theta.flat[idx] + xi.flat[idx] * (cand + si))
            env = np.where(cand > tdi, f1, np.where(cand < -sdi, f2, 1.0))
            a_i, l_i = alpha.flat[idx], lam.flat[idx]
            target = -a_i * (np.cosh(cand) - 1.0) - l_i * (np.expm1(cand) - cand)
            accept = W * env <= np.exp(target)
        done = idx[accept]
        out.flat[done] = cand[accept]
        pending.flat[done] = False
    return out


def sample_gig(order, rate2, quad, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draws with density proportional to x^(order-1) exp(-(rate2*x + quad/x)/2).

    ``quad == 0`` with ``order > 0`` is the Ga(order, rate2/2) limit and
    ``rate2 == 0`` with ``order < 0`` is the inverse-gamma limit.
    """
    order, rate2, quad = np.broadcast_arrays(
        np.asarray(order, dtype=float), np.asarray(rate2, dtype=float), np.asarray(quad, dtype=float)
    )
    if size is not None:
        order, rate2, quad = (np.broadcast_to(v, size) for v in (order, rate2, quad))
    if np.any(rate2 < 0) or np.any(quad < 0):
        raise ModelError("sample_gig requires rate2 >= 0 and quad >= 0")
    gamma_limit = quad == 0
    invgamma_limit = (rate2 == 0) & ~gamma_limit
    if np.any(gamma_limit & (order <= 0)) or np.any(invgamma_limit & (order >= 0)):
        raise ModelError("improper GIG: quad == 0 needs order > 0 and rate2 == 0 needs order < 0")
    if np.any(gamma_limit & (rate2 == 0)):
        raise ModelError("rate2 and quad cannot both be zero")

    out = np.empty(order.shape)
    general = ~(gamma_limit | invgamma_limit)
    if general.any():
        lam = order[general]
        a, b = rate2[general], quad[general]
        omega = np.sqrt(a * b)
        y = _devroye_log_gig(np.abs(lam), omega, rng)
        # shift to the GIG(|lam|, omega) scale, then undo the reflection for lam < 0
        with np.errstate(over="ignore", divide="ignore"):
            log_x = y + np.arcsinh(np.abs(lam) / omega)
        log_x = np.where(lam < 0, -log_x, log_x)
        out[general] = np.exp(log_x + 0.5 * (np.log(b) - np.log(a)))
    if gamma_limit.any():
        out[gamma_limit] = rng.gamma(order[gamma_limit], 2.0 / rate2[gamma_limit])
    if invgamma_limit.any():
        out[invgamma_limit] = 1.0 / rng.gamma(-order[invgamma_limit], 2.0 / quad[invgamma_limit])
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# conditionals


def sample_x(Y, Lambda, Psi, rng: np.random.Generator) -> np.ndarray:
    est = e_step_x(Y, Lambda, Psi)
    n, K = est.mean_x.shape
    if K == 0:
        return est.mean_x
    chol = np.linalg.cholesky(est.cov_x)
    return est.mean_x + rng.standard_normal((n, K)) @ chol.T


def gibbs_z_log_odds(Lambda, theta, delta, phi, pi, hyper: Hyperparameters) -> np.ndarray:
    """Sparse-vs-dense log odds under the pseudo-prior joint.

    Ga(theta | a, delta) appears in both branches and cancels; the dense
    branch keeps Ga(delta | b, nu) in place of Ga(delta | b, phi).
    """
    phi_col = phi[:, None]
    per_elem = (
        normal_logpdf(Lambda, theta)
        + gamma_logpdf(delta, hyper.b, phi_col)
        - gamma_logpdf(delta, hyper.b, hyper.nu)
        - normal_logpdf(Lambda, phi_col)
    )
    return per_elem.sum(axis=1) + np.log(pi) - np.log1p(-pi)


def sample_z(log_odds, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli draws with success probability expit(log_odds)."""
    rho = expit(np.asarray(log_odds, dtype=float))
    return rng.random(rho.shape) < rho


def sample_lambda(Y, X, Psi, theta, phi, z, rng: np.random.Generator,
                  Lambda: Optional[np.ndarray] = None) -> np.ndarray:
    """Loading rows drawn in factor order from their Gaussian conditionals.

    Row k is conditioned on the rows already redrawn this scan and on the
    current values of the rest (``Lambda``; zeros if omitted).
    """
    Yv = _values(Y)
    K = X.shape[1]
    p = Yv.shape[1]
    XtY = X.T @ Yv
    XtX = X.T @ X
    inv_psi = 1.0 / Psi
    Lam = np.zeros((K, p)) if Lambda is None else np.array(Lambda, dtype=float)
    prior_var = np.where(np.asarray(z)[:, None], theta, np.asarray(phi)[:, None] * np.ones((1, p)))
    for k in range(K):
        partial = XtY[k] - XtX[k] @ Lam + XtX[k, k] * Lam[k]
        prec = XtX[k, k] * inv_psi + 1.0 / prior_var[k]
        mean = inv_psi * partial / prec
        Lam[k] = mean + rng.standard_normal(p) / np.sqrt(prec)
    return Lam


class _Clamp:
    def __init__(self, lo: float, hi: float = _CEILING):
        self.lo, self.hi = lo, hi
        self.counts: Dict[str, int] = {}

    def __call__(self, name: str, value):
        arr = np.asarray(value, dtype=float)
        bad = (arr < self.lo) | (arr > self.hi) | ~np.isfinite(arr)
        if bad.any():
            self.counts[name] = self.counts.get(name, 0) + int(bad.sum())
            arr = np.clip(np.nan_to_num(arr, nan=self.lo, posinf=self.hi), self.lo, self.hi)
        return arr if arr.ndim else float(arr)


def draw_theta(Lambda, delta, a: float, rng: np.random.Generator) -> np.ndarray:
    """Sparse-branch local variance: GIG(a - 1/2, 2 delta, Lambda^2)."""
    quad = np.maximum(np.square(Lambda), _TINY)
    return sample_gig(a - 0.5, 2.0 * np.asarray(delta, dtype=float), quad, rng)


def draw_delta(theta, phi, a: float, b: float, rng: np.random.Generator) -> np.ndarray:
    """Sparse-branch Ga(a + b, theta + phi)."""
    return rng.gamma(a + b, 1.0 / (np.asarray(theta) + np.asarray(phi)))


def draw_pseudo_prior(shape, a: float, b: float, nu: float, rng: np.random.Generator):
    """(theta, delta) for dense factors from Ga(theta | a, delta) Ga(delta | b, nu)."""
    delta = rng.gamma(b, 1.0 / nu, size=shape)
    return rng.gamma(a, 1.0 / delta), delta


def draw_phi_sparse(delta_sum, tau, p: int, b: float, c: float, rng: np.random.Generator):
    """Ga(p b + c, sum_j delta + tau)."""
    return rng.gamma(p * b + c, 1.0 / (np.asarray(delta_sum) + np.asarray(tau)))


def draw_phi_dense(omega, tau, p: int, c: float, rng: np.random.Generator):
    """GIG(c - p/2, 2 tau, sum_j Lambda^2)."""
    omega = np.maximum(np.asarray(omega, dtype=float), _TINY)
    return sample_gig(c - 0.5 * p, 2.0 * np.asarray(tau, dtype=float), omega, rng)


def draw_tau(phi, eta, c: float, d: float, rng: np.random.Generator):
    """Ga(c + d, phi + eta)."""
    return rng.gamma(c + d, 1.0 / (np.asarray(phi) + np.asarray(eta)))


def draw_eta(tau_sum, K: int, gamma, d: float, e: float, rng: np.random.Generator, size=None):
    """Ga(K d + e, gamma + sum_k tau)."""
    return rng.gamma(K * d + e, 1.0 / (np.asarray(gamma) + np.asarray(tau_sum)), size=size)


def draw_gamma(eta, e: float, f: float, nu: float, rng: np.random.Generator, size=None):
    """Ga(e + f, eta + nu)."""
    return rng.gamma(e + f, 1.0 / (np.asarray(eta) + nu), size=size)


def draw_pi(n_sparse, K: int, alpha: float, beta: float, rng: np.random.Generator, size=None):
    """Beta(alpha + sum z, beta + K - sum z); pi is the sparse probability."""
    return rng.beta(alpha + np.asarray(n_sparse), beta + K - np.asarray(n_sparse), size=size)


def draw_psi(ss, n: int, psi_floor: float, rng: np.random.Generator):
    """IG(n/2 - 1, ss/2) with the shape floored at 1e-2 and the result at psi_floor."""
    shape = max(0.5 * n - 1.0, 1e-2)
    scale = np.maximum(0.5 * np.asarray(ss, dtype=float), psi_floor * shape)
    psi = 1.0 / rng.gamma(shape, 1.0 / scale)
    return np.clip(psi, psi_floor, _CEILING)


def sample_scales(Y, state: GibbsState, hyper: Hyperparameters, rng: np.random.Generator,
                  clamp: Optional[_Clamp] = None, sample_psi: bool = True) -> GibbsState:
    """One scan over theta, delta, phi, tau, eta, gamma, pi and Psi (in place)."""
    clamp = clamp or _Clamp(hyper.floor)
    Lam = state.Lambda
    K, p = Lam.shape
    z = state.z
    zc = z[:, None]

    theta_sparse = draw_theta(Lam, state.delta, hyper.a, rng)
    theta_pseudo, delta_pseudo = draw_pseudo_prior((K, p), hyper.a, hyper.b, hyper.nu, rng)
    state.theta = clamp("theta", np.where(zc, theta_sparse, theta_pseudo))

    delta_sparse = draw_delta(state.theta, state.phi[:, None], hyper.a, hyper.b, rng)
    state.delta = clamp("delta", np.where(zc, delta_sparse, delta_pseudo))

    phi = np.empty(K)
    if z.any():
        phi[z] = draw_phi_sparse(state.delta[z].sum(axis=1), state.tau[z], p, hyper.b, hyper.c, rng)
    if (~z).any():
        omega = np.sum(np.square(Lam[~z]), axis=1)
        phi[~z] = draw_phi_dense(omega, state.tau[~z], p, hyper.c, rng)
    state.phi = clamp("phi", phi)

    state.tau = clamp("tau", draw_tau(state.phi, state.eta, hyper.c, hyper.d, rng))
    state.eta = clamp("eta", float(draw_eta(state.tau.sum(), K, state.gamma, hyper.d, hyper.e, rng)))
    state.gamma = clamp("gamma", float(draw_gamma(state.eta, hyper.e, hyper.f, hyper.nu, rng)))
    pi = draw_pi(int(z.sum()), K, hyper.alpha, hyper.beta, rng)
    state.pi = float(np.clip(pi, 1e-300, 1.0 - 1e-16))

    if sample_psi:
        Yv = _values(Y)
        resid = Yv - state.X @ Lam
        ss = np.einsum("ij,ij->j", resid, resid)
        state.Psi = draw_psi(ss, Yv.shape[0], hyper.psi_floor, rng)
    return state


def gibbs_sweep(Y, state: GibbsState, hyper: Hyperparameters, rng: np.random.Generator,
                clamp: Optional[_Clamp] = None, sample_psi: bool = True) -> GibbsState:
    state.X = sample_x(Y, state.Lambda, state.Psi, rng)
    odds = gibbs_z_log_odds(state.Lambda, state.theta, state.delta, state.phi, state.pi, hyper)
    state.z = sample_z(odds, rng)
    state.Lambda = sample_lambda(Y, state.X, state.Psi, state.theta, state.phi, state.z, rng,
                                 state.Lambda)
    return sample_scales(Y, state, hyper, rng, clamp, sample_psi)


def initial_state(Y, hyper: Hyperparameters, seed: int, rng: np.random.Generator) -> GibbsState:
    work = initialize(Y, hyper, seed)
    sh = work.shrink
    K = work.Lambda.shape[0]
    return GibbsState(
        X=np.zeros((_values(Y).shape[0], K)),
        Lambda=work.Lambda,
        Psi=work.Psi,
        z=rng.random(K) < 0.5,
        theta=sh.theta,
        delta=sh.delta,
        phi=sh.phi,
        tau=sh.tau,
        eta=sh.eta,
        gamma=sh.gamma,
        pi=0.5,
    )


def draw_from_prior(n: int, p: int, K: int, hyper: Hyperparameters, Psi, rng: np.random.Generator):
    """Forward simulation of (state, Y) from the joint the sampler targets."""
    gamma = rng.gamma(hyper.f, 1.0 / hyper.nu)
    eta = rng.gamma(hyper.e, 1.0 / gamma)
    tau = rng.gamma(hyper.d, 1.0 / eta, size=K)
    phi = rng.gamma(hyper.c, 1.0 / tau)
    pi = rng.beta(hyper.alpha, hyper.beta)
    z = rng.random(K) < pi
    delta_rate = np.where(z[:, None], phi[:, None], hyper.nu) * np.ones((1, p))
    delta = rng.gamma(hyper.b, 1.0 / delta_rate)
    theta = rng.gamma(hyper.a, 1.0 / delta)
    var = np.where(z[:, None], theta, phi[:, None])
    Lam = rng.standard_normal((K, p)) * np.sqrt(var)
    X = rng.standard_normal((n, K))
    Psi = np.asarray(Psi, dtype=float) * np.ones(p)
    Y = X @ Lam + rng.standard_normal((n, p)) * np.sqrt(Psi)
    state = GibbsState(X, Lam, Psi, z, theta, delta, phi, tau, float(eta), float(gamma), float(pi))
    return state, Y


def chain_seed(seed: int, chain: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(chain)])


_BLOCKS = ("X", "Lambda", "theta", "delta", "phi", "tau", "eta", "gamma", "pi", "Psi")


def run_gibbs(Y, hyper: Hyperparameters = Hyperparameters(),
              config: GibbsConfig = GibbsConfig()) -> ChainSummary:
    """Run one chain and summarize the retained draws.

    Extreme draws are clamped to ``[hyper.floor, 1e12]``; the number of
    clamped entries per parameter is reported in ``clamp_counts``.
    """
    if not isinstance(Y, DataMatrix):
        Y = DataMatrix(np.asarray(Y, dtype=float))
    rng = np.random.default_rng(chain_seed(config.seed, config.chain))
    state = initial_state(Y, hyper, config.seed, rng)
    clamp = _Clamp(hyper.floor)
    sums: Dict[str, np.ndarray] = {}
    sumsq: Dict[str, np.ndarray] = {}
    z_count = np.zeros(state.Lambda.shape[0])
    traces = {name: [] for name in ("eta", "gamma", "pi")} if config.trace else {}
    kept = 0
    for it in range(config.n_iters):
        gibbs_sweep(Y, state, hyper, rng, clamp, config.sample_psi)
        if it < config.burn_in or (it - config.burn_in) % config.thin:
            continue
        kept += 1
        for name in _BLOCKS:
            v = np.asarray(getattr(state, name), dtype=float)
            if name in sums:
                sums[name] += v
                sumsq[name] += v * v
            else:
                sums[name] = v.copy()
                sumsq[name] = v * v
        z_count += state.z
        for name in traces:
            traces[name].append(getattr(state, name))
    mean = {k: v / kept for k, v in sums.items()}
    var = {k: np.maximum(sumsq[k] / kept - mean[k] ** 2, 0.0) for k in sums}
    if clamp.counts:
        logger.info("clamped draws: %s", clamp.counts)
    return ChainSummary(
        mean=mean,
        var=var,
        z_frequency=z_count / kept,
        n_retained=kept,
        clamp_counts=dict(clamp.counts),
        traces={k: np.asarray(v) for k, v in traces.items()},
    )
