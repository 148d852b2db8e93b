"""End-to-end acceptance report.

Each test prints one ``PASS`` or ``FAIL`` line for its criterion, then
asserts the same condition.  Run ``pytest tests/test_acceptance.py -v`` to
see the report.
"""

import functools
import time

import numpy as np
import pytest
from scipy import stats

from shrinkfactor import Hyperparameters, fit_em, gen_dataset, preset
from shrinkfactor.cli import EXIT_OK, main
from shrinkfactor.gibbs import (
    draw_delta,
    draw_eta,
    draw_gamma,
    draw_phi_dense,
    draw_phi_sparse,
    draw_pi,
    draw_psi,
    draw_tau,
    draw_theta,
    sample_gig,
)
from shrinkfactor.postprocess import DENSE, SPARSE, classify_factors, threshold_loadings
from shrinkfactor.stability import dense_stability, gram_trace_distance, scale_rows, sparse_stability

import oracles
from harness import STATIONARITY_TOL, geweke_z_scores, stationarity_report

REPLICATES = range(10)
FIT_TIME_LIMIT = 300.0


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        return ok
    return emit


@functools.lru_cache(maxsize=None)
def fitted(name: str, seed: int):
    Y, truth = gen_dataset(preset(name, seed=seed))
    start = time.perf_counter()
    r = fit_em(Y, Hyperparameters(k_init=50), seed=seed)
    elapsed = time.perf_counter() - start
    labels = np.array(classify_factors(r.shrinkage_state.rho))
    L = r.factor_state.Lambda
    return truth, L[labels == SPARSE], L[labels == DENSE], elapsed


# --- simulations ---------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_1_sim1_recovery(report):
    scores, times = [], []
    for seed in REPLICATES:
        truth, sparse, _, elapsed = fitted("sim1", seed)
        scores.append(sparse_stability(sparse, truth.Lambda).r_s)
        times.append(elapsed)
    ok = np.mean(scores) >= 0.75 and max(times) < FIT_TIME_LIMIT
    assert report(1, ok, f"Sim1 mean r_s={np.mean(scores):.4f} (min {min(scores):.4f}) >= 0.75; "
                         f"slowest fit {max(times):.1f}s < {FIT_TIME_LIMIT:.0f}s")


@pytest.mark.slow
def test_criterion_2_sim2_joint_recovery(report):
    dense_counts, scores, ratios, rd_fit, rd_rand = [], [], [], [], []
    for seed in REPLICATES:
        truth, sparse, dense, _ = fitted("sim2", seed)
        dense_counts.append(len(dense))
        scores.append(sparse_stability(sparse, truth.Lambda).r_s)
        random = np.random.default_rng(10_000 + seed).standard_normal(truth.Omega.shape)
        fit_value = dense_stability(dense, truth.Omega).r_d
        rand_value = dense_stability(random, truth.Omega).r_d
        rd_fit.append(fit_value)
        rd_rand.append(rand_value)
        ratios.append(rand_value / fit_value)
    mean_dense = np.mean(dense_counts)
    ratio = np.mean(rd_rand) / np.mean(rd_fit)
    ok = abs(mean_dense - 5) <= 2 and np.mean(scores) >= 0.70 and ratio >= 5
    assert report(2, ok, (
        f"Sim2 mean dense count {mean_dense:.1f} (per replicate {dense_counts}) within 5+-2; "
        f"mean sparse r_s={np.mean(scores):.4f} >= 0.70; mean r_d fit {np.mean(rd_fit):.3f} vs "
        f"random {np.mean(rd_rand):.3f}, ratio {ratio:.1f} >= 5 "
        f"(per-replicate ratios {[round(x, 1) for x in ratios]})"
    ))


@pytest.mark.slow
def test_criterion_3_cluster_size(report):
    sizes = []
    for seed in REPLICATES:
        _, sparse, _, _ = fitted("sim1", seed)
        _, supports = threshold_loadings(sparse, 1e-10)
        sizes.extend(len(s) for s in supports)
    mean = float(np.mean(sizes))
    assert report(3, 8 <= mean <= 20, f"Sim1 mean recovered support size {mean:.2f} in [8, 20] "
                                      f"over {len(sizes)} sparse factors")


# --- M-step stationarity -------------------------------------------------------------


def test_criterion_4_stationarity(report):
    worst = {}
    for seed in range(100):
        for name, value in stationarity_report(seed).items():
            worst[name] = max(worst.get(name, 0.0), value)
    ok = max(worst.values()) <= STATIONARITY_TOL
    detail = ", ".join(f"{k} {v:.1e}" for k, v in sorted(worst.items()))
    assert report(4, ok, f"max |dQ|/(1+|Q|) over 100 configurations <= 1e-6: {detail}")


# --- TPB <-> gamma -------------------------------------------------------------------


def test_criterion_5_tpb_gamma(report):
    stats_by_triple = {}
    for a, b, nu in [(0.5, 0.5, 1.0), (1.0, 0.5, 1.0), (2.0, 3.0, 0.5)]:
        rng = np.random.default_rng(11)
        n = 100_000
        u = oracles.tpb_inverse_cdf_sample(a, b, nu, n, rng)
        delta = rng.gamma(b, 1.0 / nu, size=n)
        theta = rng.gamma(a, 1.0 / delta)
        stats_by_triple[(a, b, nu)] = stats.ks_2samp(-u, np.log(theta)).statistic
    worst = max(stats_by_triple.values())
    detail = ", ".join(f"{k}: {v:.4f}" for k, v in stats_by_triple.items())
    assert report(5, worst < 0.02, f"two-sample KS < 0.02 for {detail}")


# --- Gibbs ---------------------------------------------------------------------------


def _conditional_moment_checks():
    """(name, ok) for every conjugate and GIG conditional over 10 random settings."""
    N = 100_000
    out = []
    for setting in range(10):
        rng = np.random.default_rng(500 + setting)
        r = np.random.default_rng(np.random.SeedSequence([77, setting]))
        a, b, c, d, e, f = rng.uniform(0.3, 3, 6)
        nu = rng.uniform(0.5, 2)
        theta, phi, eta, gamma, tau, delta, lam = rng.uniform(0.2, 3, 7)
        tau_sum, delta_sum = rng.uniform(0.5, 5, 2)
        K, p, n = int(rng.integers(1, 20)), int(rng.integers(2, 12)), int(rng.integers(12, 60))

        def gamma_check(name, draws, shape, rate):
            mean, var = oracles.gamma_moments(shape, rate)
            out.append((name, oracles.mean_within(draws, mean)[0] and oracles.var_within(draws, var)[0]))

        def dist_check(name, draws, mean, var):
            out.append((name, oracles.mean_within(draws, mean)[0] and oracles.var_within(draws, var)[0]))

        def gig_check(name, draws, order, rate2, quad):
            m1 = oracles.gig_quadrature_moment(order, rate2, quad)
            m2 = oracles.gig_quadrature_moment(order, rate2, quad, 2)
            dist_check(name, draws, m1, m2 - m1**2)

        gamma_check("delta", draw_delta(np.full(N, theta), phi, a, b, r), a + b, theta + phi)
        gamma_check("tau", draw_tau(np.full(N, phi), eta, c, d, r), c + d, phi + eta)
        gamma_check("eta", draw_eta(tau_sum, K, gamma, d, e, r, size=N), K * d + e, gamma + tau_sum)
        gamma_check("gamma", draw_gamma(eta, e, f, nu, r, size=N), e + f, eta + nu)
        gamma_check("phi_sparse", draw_phi_sparse(np.full(N, delta_sum), tau, p, b, c, r),
                    p * b + c, delta_sum + tau)
        n_sparse = int(rng.integers(0, K + 1))
        beta = stats.beta(1 + n_sparse, 1 + K - n_sparse)
        dist_check("pi", draw_pi(n_sparse, K, 1.0, 1.0, r, size=N), beta.mean(), beta.var())
        ss = rng.uniform(1, 30)
        ig = stats.invgamma(n / 2 - 1, scale=ss / 2)
        dist_check("psi", draw_psi(np.full(N, ss), n, 1e-9, r), ig.mean(), ig.var())
        gig_check("theta", draw_theta(np.full(N, lam), np.full(N, delta), a, r), a - 0.5, 2 * delta, lam**2)
        omega = rng.uniform(0.5, 3) * p
        gig_check("phi_dense", draw_phi_dense(np.full(N, omega), tau, p, c, r), c - p / 2, 2 * tau, omega)
    return out


def test_criterion_6_gibbs_correctness(report):
    checks = _conditional_moment_checks()
    failed = sorted({name for name, ok in checks if not ok})
    ks = {}
    triples = [(-1.0, 1.0, 3.0), (-0.25, 3.0, 0.1), (0.0, 2.0, 2.0), (0.5, 0.2, 5.0), (2.0, 0.5, 1.0)]
    for i, (order, rate2, quad) in enumerate(triples):
        x = sample_gig(order, rate2, quad, np.random.default_rng(900 + i), size=100_000)
        ks[order] = stats.kstest(x, oracles.gig_quadrature_cdf(order, rate2, quad)).statistic
    z = geweke_z_scores()
    ok = not failed and max(ks.values()) < 0.01 and np.all(np.abs(z) <= 4)
    assert report(6, ok, (
        f"{sum(ok for _, ok in checks)}/{len(checks)} conditional moment "
        f"checks within 3 SE{' (failed: ' + ', '.join(failed) + ')' if failed else ''}; "
        f"GIG KS max {max(ks.values()):.4f} < 0.01; Geweke |z| max {np.max(np.abs(z)):.2f} <= 4"
    ))


# --- stability invariances -----------------------------------------------------------


def test_criterion_7_stability_invariances(report):
    rng = np.random.default_rng(7)
    rs_gap = rot = trace_rel = 0.0
    for _ in range(50):
        K1, K2, p = rng.integers(2, 8), rng.integers(2, 8), 50
        L1, L2 = rng.normal(size=(K1, p)), rng.normal(size=(K2, p))
        scale = rng.choice([-1, 1], K2) * rng.uniform(0.01, 100, K2)
        moved = scale[:, None] * L2[rng.permutation(K2)]
        rs_gap = max(rs_gap, abs(sparse_stability(L1, L2).r_s - sparse_stability(L1, moved).r_s))
        S, _ = scale_rows(rng.normal(size=(K1, p)))
        Q = stats.ortho_group.rvs(int(K1), random_state=rng)
        rot = max(rot, gram_trace_distance(S, Q @ S) / p**2)
        M1, M2 = rng.normal(size=(5, 50)), rng.normal(size=(5, 50))
        naive = oracles.naive_trace_distance(M1, M2)
        trace_rel = max(trace_rel, abs(gram_trace_distance(M1, M2) - naive) / naive)
    ok = rs_gap <= 1e-12 and rot <= 1e-10 and trace_rel <= 1e-9
    assert report(7, ok, f"r_s permutation/scale change {rs_gap:.1e} <= 1e-12; r_d under rotation "
                         f"{rot:.1e} <= 1e-10; trace expansion relative error {trace_rel:.1e} <= 1e-9")


# --- determinism ---------------------------------------------------------------------


def _snapshot(directory):
    return {
        str(p.relative_to(directory)): p.read_bytes()
        for p in sorted(directory.rglob("*"))
        if p.is_file() and p.name != "timing.json"
    }


def test_criterion_8_determinism(report, tmp_path):
    data = tmp_path / "sim"
    runs = {
        "simulate": (["simulate", "--preset", "sim1", "--seed", "3", "--out-dir", str(data)], data),
        "fit em": (["fit", str(data / "Y.tsv"), "--k-init", "50", "--seed", "3", "--threads", "1",
                    "--out-dir", str(tmp_path / "em")], tmp_path / "em"),
        "fit gibbs": (["fit", str(data / "Y.tsv"), "--engine", "gibbs", "--k-init", "12", "--gibbs-iters", "200",
                       "--burn-in", "100", "--seed", "3", "--threads", "1", "--out-dir", str(tmp_path / "gb")],
                      tmp_path / "gb"),
        "stability": (["stability", str(tmp_path / "em" / "lambda.tsv"), str(data / "truth_lambda.tsv"),
                       "--out-dir", str(tmp_path / "st")], tmp_path / "st"),
    }
    identical = {}
    for name, (argv, out) in runs.items():
        assert main(argv) == EXIT_OK
        first = _snapshot(out)
        assert main(argv) == EXIT_OK
        identical[name] = first == _snapshot(out) and len(first) > 0
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in identical.items())
    assert report(8, all(identical.values()), f"byte-identical reruns: {detail}")
