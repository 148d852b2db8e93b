import numpy as np
import pytest
from scipy import stats

from shrinkfactor.em import e_step_x, e_step_z, z_log_odds
from shrinkfactor.gibbs import (
    GibbsConfig,
    _Clamp,
    chain_seed,
    draw_delta,
    draw_eta,
    draw_gamma,
    draw_phi_dense,
    draw_phi_sparse,
    draw_pi,
    draw_pseudo_prior,
    draw_psi,
    draw_tau,
    draw_theta,
    gibbs_z_log_odds,
    run_gibbs,
    sample_gig,
    sample_lambda,
    sample_x,
    sample_z,
)
from shrinkfactor.model import Hyperparameters, ModelError
from shrinkfactor.simgen import SimConfig, gen_dataset
from shrinkfactor.stability import sparse_stability

import oracles
from harness import geweke_z_scores

N = 100_000


def rng_for(*key):
    return np.random.default_rng(np.random.SeedSequence([2024, *key]))


# --- GIG sampler ---------------------------------------------------------------------


def test_gig_gamma_limit():
    a, rate2 = 1.7, 3.0
    x = sample_gig(a, rate2, 0.0, rng_for(1), size=N)
    ok, z = oracles.mean_within(x, a / (rate2 / 2))
    assert ok, z


def test_gig_inverse_gamma_limit():
    a, quad = 2.5, 1.5
    x = sample_gig(-a, 0.0, quad, rng_for(2), size=N)
    ok, z = oracles.mean_within(1.0 / x, a / (quad / 2))
    assert ok, z


def test_gig_quadrature_mean():
    x = sample_gig(0.0, 2.0, 2.0, rng_for(3), size=N)
    ok, z = oracles.mean_within(x, oracles.gig_quadrature_moment(0.0, 2.0, 2.0))
    assert ok, z


@pytest.mark.parametrize("order,rate2,quad", [
    (-1.0, 1.0, 3.0), (-0.25, 3.0, 0.1), (0.0, 2.0, 2.0), (0.5, 0.2, 5.0), (2.0, 0.5, 1.0),
])
def test_gig_ks_against_quadrature_cdf(order, rate2, quad):
    x = sample_gig(order, rate2, quad, rng_for(4, int(order * 100) + 1000), size=N)
    cdf = oracles.gig_quadrature_cdf(order, rate2, quad)
    assert stats.kstest(x, cdf).statistic < 0.01


@pytest.mark.parametrize("order,rate2,quad", [
    (2.5, 1.0, 1e-10), (-3.0, 1e-6, 1.0), (40.0, 1.0, 1.0), (-40.0, 1.0, 1.0), (-30.0, 2.0, 1e-4),
])
def test_gig_extreme_parameters_log_mean(order, rate2, quad):
    x = sample_gig(order, rate2, quad, rng_for(5, int(abs(order))), size=N)
    logx = np.log(x)
    cdf = oracles.gig_quadrature_cdf(order, rate2, quad)
    assert np.all(np.isfinite(logx))
    assert stats.kstest(x, cdf).statistic < 0.01


def test_gig_vectorized_parameters():
    order = np.array([-1.0, 0.5, 3.0])
    x = sample_gig(order[:, None], 1.0, 2.0, rng_for(6), size=(3, 40_000))
    for i, o in enumerate(order):
        ok, z = oracles.mean_within(x[i], oracles.gig_quadrature_moment(o, 1.0, 2.0))
        assert ok, (o, z)


@pytest.mark.parametrize("order,rate2,quad", [(0.0, 0.0, 0.0), (-1.0, 1.0, 0.0), (1.0, 0.0, 1.0), (1.0, -1.0, 1.0)])
def test_gig_domain_errors(order, rate2, quad):
    with pytest.raises(ModelError):
        sample_gig(order, rate2, quad, rng_for(7))


# --- X, Z and Lambda -----------------------------------------------------------------


def test_sample_x_zero_loadings_standard_normal():
    draws = sample_x(np.zeros((N, 3)), np.zeros((2, 3)), np.ones(3), rng_for(10))
    for k in range(2):
        assert oracles.mean_within(draws[:, k], 0.0)[0]
        assert oracles.var_within(draws[:, k], 1.0)[0]
    ok, z = oracles.mean_within(draws[:, 0] * draws[:, 1], 0.0)
    assert ok, z


def test_sample_x_scalar_posterior():
    y = 1.4
    draws = sample_x(np.full((N, 1), y), np.array([[1.0]]), np.array([1.0]), rng_for(11))[:, 0]
    assert oracles.mean_within(draws, y / 2)[0]
    assert oracles.var_within(draws, 0.5)[0]


def test_sample_x_matches_e_step():
    rng = np.random.default_rng(5)
    Y = rng.normal(size=(5, 4))
    Lam = rng.normal(size=(3, 4))
    Psi = rng.uniform(0.5, 2, size=4)
    est = e_step_x(Y, Lam, Psi)
    reps = 20_000
    draws = sample_x(np.repeat(Y, reps, axis=0), Lam, Psi, rng_for(12)).reshape(5, reps, 3)
    for i in range(5):
        for k in range(3):
            assert oracles.mean_within(draws[i, :, k], est.mean_x[i, k])[0]
            assert oracles.var_within(draws[i, :, k], est.cov_x[k, k])[0]


def test_sample_z_forced_and_symmetric():
    assert sample_z(np.full(50, np.inf), rng_for(13)).all()
    freq = sample_z(np.zeros(N), rng_for(14))
    ok, z = oracles.mean_within(freq.astype(float), 0.5)
    assert ok, z


def test_sample_z_matches_e_step_z():
    rng = np.random.default_rng(15)
    hyper = Hyperparameters()
    Lam = rng.normal(size=(3, 2)) * 0.5
    theta, delta = rng.uniform(0.3, 2, (3, 2)), rng.uniform(0.3, 2, (3, 2))
    phi = rng.uniform(0.3, 2, 3)
    rho = e_step_z(Lam, theta, delta, phi, np.log(0.4), np.log(0.6), hyper)
    odds = z_log_odds(Lam, theta, delta, phi, np.log(0.4), np.log(0.6), hyper)
    draws = sample_z(np.tile(odds, (N, 1)), rng_for(16))
    for k in range(3):
        ok, z = oracles.mean_within(draws[:, k].astype(float), rho[k])
        assert ok, (k, z)


def test_gibbs_z_log_odds_direct_evaluation():
    a, b, nu = 0.5, 0.5, 1.0
    hyper = Hyperparameters(a=a, b=b, nu=nu)
    Lam = np.array([[0.4, -1.1]])
    theta = np.array([[0.7, 1.3]])
    delta = np.array([[0.9, 0.6]])
    phi = np.array([1.2])
    pi = 0.35
    sparse = np.prod(stats.norm.pdf(Lam, scale=np.sqrt(theta))
                     * stats.gamma.pdf(theta, a, scale=1 / delta)
                     * stats.gamma.pdf(delta, b, scale=1 / phi[0]))
    dense = np.prod(stats.norm.pdf(Lam, scale=np.sqrt(phi[0]))
                    * stats.gamma.pdf(theta, a, scale=1 / delta)
                    * stats.gamma.pdf(delta, b, scale=1 / nu))
    expected = np.log(pi * sparse) - np.log((1 - pi) * dense)
    assert gibbs_z_log_odds(Lam, theta, delta, phi, pi, hyper)[0] == pytest.approx(expected, abs=1e-12)


def test_sample_lambda_prior_when_factors_vanish():
    p = N
    theta = np.full((2, p), 0.7)
    phi = np.array([1.0, 2.5])
    z = np.array([True, False])
    draws = sample_lambda(np.zeros((3, p)), np.zeros((3, 2)), np.ones(p), theta, phi, z, rng_for(20))
    assert oracles.var_within(draws[0], 0.7)[0]
    assert oracles.var_within(draws[1], 2.5)[0]


def test_sample_lambda_scalar_conjugate():
    x, y, psi, theta = 1.3, 0.8, 0.6, 2.0
    p = N
    draws = sample_lambda(np.full((1, p), y), np.array([[x]]), np.full(p, psi),
                          np.full((1, p), theta), np.array([1.0]), np.array([True]), rng_for(21))[0]
    prec = x * x / psi + 1 / theta
    assert oracles.mean_within(draws, (x * y / psi) / prec)[0]
    assert oracles.var_within(draws, 1 / prec)[0]


def test_sample_lambda_z_flip_identical_when_variances_coincide():
    rng = np.random.default_rng(22)
    Y, X = rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
    theta = np.full((2, 4), 1.7)
    phi = np.full(2, 1.7)
    a = sample_lambda(Y, X, np.ones(4), theta, phi, np.array([True, False]), rng_for(23))
    b = sample_lambda(Y, X, np.ones(4), theta, phi, np.array([False, True]), rng_for(23))
    np.testing.assert_array_equal(a, b)


def test_sample_lambda_conditions_on_current_rows():
    """Row 0 must see the current value of row 1, not zeros."""
    rng = np.random.default_rng(24)
    X = rng.normal(size=(200, 2))
    X[:, 1] = X[:, 0]  # perfectly collinear factors
    Y = np.zeros((200, 1))
    current = np.array([[0.0], [5.0]])
    draws = sample_lambda(Y, X, np.array([0.01]), np.ones((2, 1)), np.ones(2),
                          np.array([True, True]), rng_for(25), Lambda=current)
    # with row 1 at 5 the data push row 0 to about -5
    assert draws[0, 0] < -4


# --- scale conditionals --------------------------------------------------------------


def _check_gamma(draws, shape, rate):
    mean, var = oracles.gamma_moments(shape, rate)
    ok_m, zm = oracles.mean_within(draws, mean)
    ok_v, zv = oracles.var_within(draws, var)
    assert ok_m and ok_v, (zm, zv)


def test_delta_horseshoe_example():
    draws = draw_delta(np.ones(N), 1.0, 0.5, 0.5, rng_for(30))
    ok, z = oracles.mean_within(draws, 0.5)
    assert ok, z


def test_eta_example():
    draws = draw_eta(2.0, 2, 1.0, 0.5, 0.5, rng_for(31), size=N)
    ok, z = oracles.mean_within(draws, 0.5)
    assert ok, z


@pytest.mark.parametrize("setting", range(10))
def test_conjugate_conditionals_moments(setting):
    rng = np.random.default_rng(100 + setting)
    a, b, c, d, e, f = rng.uniform(0.3, 3, 6)
    nu = rng.uniform(0.5, 2)
    theta, phi, eta, gamma = rng.uniform(0.2, 3, 4)
    tau_sum, delta_sum = rng.uniform(0.5, 5, 2)
    K, p = int(rng.integers(1, 20)), int(rng.integers(2, 50))
    r = rng_for(32, setting)
    _check_gamma(draw_delta(np.full(N, theta), phi, a, b, r), a + b, theta + phi)
    _check_gamma(draw_tau(np.full(N, phi), eta, c, d, r), c + d, phi + eta)
    _check_gamma(draw_eta(tau_sum, K, gamma, d, e, r, size=N), K * d + e, gamma + tau_sum)
    _check_gamma(draw_gamma(eta, e, f, nu, r, size=N), e + f, eta + nu)
    _check_gamma(draw_phi_sparse(np.full(N, delta_sum), 1.0, p, b, c, r), p * b + c, delta_sum + 1.0)
    th, de = draw_pseudo_prior(N, a, b, nu, r)
    _check_gamma(de, b, nu)
    n_sparse = int(rng.integers(0, K + 1))
    al, be = rng.uniform(0.5, 3, 2)
    pis = draw_pi(n_sparse, K, al, be, r, size=N)
    dist = stats.beta(al + n_sparse, be + K - n_sparse)
    assert oracles.mean_within(pis, dist.mean())[0]
    assert oracles.var_within(pis, dist.var())[0]


@pytest.mark.parametrize("setting", range(10))
def test_gig_conditionals_moments(setting):
    rng = np.random.default_rng(200 + setting)
    a, c = rng.uniform(0.3, 3, 2)
    delta, lam, tau = rng.uniform(0.2, 3, 3)
    p = int(rng.integers(2, 12))
    omega = rng.uniform(0.5, 3) * p
    r = rng_for(33, setting)
    th = draw_theta(np.full(N, lam), np.full(N, delta), a, r)
    mean = oracles.gig_quadrature_moment(a - 0.5, 2 * delta, lam**2)
    var = oracles.gig_quadrature_moment(a - 0.5, 2 * delta, lam**2, 2) - mean**2
    assert oracles.mean_within(th, mean)[0] and oracles.var_within(th, var)[0]
    ph = draw_phi_dense(np.full(N, omega), tau, p, c, r)
    mean = oracles.gig_quadrature_moment(c - p / 2, 2 * tau, omega)
    var = oracles.gig_quadrature_moment(c - p / 2, 2 * tau, omega, 2) - mean**2
    assert oracles.mean_within(ph, mean)[0] and oracles.var_within(ph, var)[0]


@pytest.mark.parametrize("setting", range(10))
def test_psi_conditional_moments(setting):
    rng = np.random.default_rng(300 + setting)
    n = int(rng.integers(12, 60))
    ss = rng.uniform(1, 30)
    draws = draw_psi(np.full(N, ss), n, 1e-9, rng_for(34, setting))
    shape, scale = n / 2 - 1, ss / 2
    dist = stats.invgamma(shape, scale=scale)
    ok_m, zm = oracles.mean_within(draws, dist.mean())
    ok_v, zv = oracles.var_within(draws, dist.var())
    assert ok_m and ok_v, (zm, zv)


def test_psi_degenerate_residuals_stay_proper():
    out = draw_psi(np.zeros(5), 2, 1e-6, rng_for(35))
    assert np.all(np.isfinite(out)) and np.all(out >= 1e-6)


def test_clamp_counts_extremes():
    clamp = _Clamp(1e-6, 1e3)
    out = clamp("theta", np.array([1e-9, 1.0, 1e5, np.nan]))
    np.testing.assert_array_equal(out, [1e-6, 1.0, 1e3, 1e-6])
    assert clamp.counts == {"theta": 3}


# --- joint correctness ---------------------------------------------------------------


def test_geweke_joint_distribution():
    z = geweke_z_scores()
    assert np.all(np.abs(z) <= 4.0), z


# --- full chains ---------------------------------------------------------------------


def test_gibbs_config_validation():
    with pytest.raises(ModelError):
        GibbsConfig(n_iters=10, burn_in=10)
    with pytest.raises(ModelError):
        GibbsConfig(thin=0)
    assert GibbsConfig(n_iters=10, burn_in=4, thin=3).n_retained == 2


def test_chain_seed_distinguishes_chains():
    a = np.random.default_rng(chain_seed(1, 0)).random()
    b = np.random.default_rng(chain_seed(1, 1)).random()
    assert a != b


def test_run_gibbs_is_deterministic_and_consistent():
    Y, _ = gen_dataset(SimConfig(n=30, p=20, k_sparse=2, cluster_min=3, cluster_max=6, seed=3))
    hyper = Hyperparameters(k_init=4)
    config = GibbsConfig(n_iters=60, burn_in=20, thin=2, seed=9, trace=True)
    s1 = run_gibbs(Y, hyper, config)
    s2 = run_gibbs(Y, hyper, config)
    for name in s1.mean:
        assert s1.mean[name].tobytes() == s2.mean[name].tobytes()
        assert s1.var[name].tobytes() == s2.var[name].tobytes()
    assert s1.z_frequency.tobytes() == s2.z_frequency.tobytes()
    assert s1.n_retained == config.n_retained == 20
    assert np.all((s1.z_frequency >= 0) & (s1.z_frequency <= 1))
    assert len(s1.traces["eta"]) == 20


def test_run_gibbs_pure_noise_has_no_active_factors():
    Y = np.random.default_rng(0).normal(size=(100, 60))
    s = run_gibbs(Y, Hyperparameters(k_init=10), GibbsConfig(n_iters=1000, burn_in=500, seed=0))
    assert len(s.active_factors()) == 0


def test_run_gibbs_recovers_small_sim1():
    Y, truth = gen_dataset(SimConfig(n=100, p=60, k_sparse=4, seed=0))
    s = run_gibbs(Y, Hyperparameters(k_init=10), GibbsConfig(n_iters=2000, burn_in=1000, seed=0))
    active = s.active_factors()
    assert len(active) >= 2
    assert sparse_stability(s.Lambda[active], truth.Lambda).r_s >= 0.7
