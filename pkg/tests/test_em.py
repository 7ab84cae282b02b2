import warnings

import numpy as np
import pytest

from hpfr.data import BasisConfig, assemble_design, dataset_from_arrays
from hpfr.em import FitConfig, e_step, fit, q1, update_beta, update_nu, update_psi
from hpfr.kernels import CovParams, SqExpParams, sigma_from_covariates
from hpfr.likelihood import ModelParams, marginal_loglik
from hpfr.mixing import MixingFamily

from conftest import TRUE_COV, simulate_gp_dataset

QUICK = FitConfig(compute_information=False)


def brute_force_gls(ds, design, weights, cov):
    """Weighted GLS through one dense block-diagonal system."""
    A = np.vstack(design.A)
    y = np.concatenate([s.y for s in ds])
    N = sum(s.n for s in ds)
    P = np.zeros((N, N))
    k = 0
    for s, w in zip(ds, weights):
        P[k:k + s.n, k:k + s.n] = w * np.linalg.inv(sigma_from_covariates(s.X, s.W, cov))
        k += s.n
    return np.linalg.solve(A.T @ P @ A, A.T @ P @ y)


def test_gls_matches_brute_force_and_weight_scale_invariance(rng):
    ds = simulate_gp_dataset(rng, M=5, n=12)
    design = assemble_design(ds, BasisConfig((-4.0, 4.0), 3, 3))
    w = rng.uniform(0.2, 2.0, ds.M)
    beta = update_beta(ds, design, w, TRUE_COV)
    ref = brute_force_gls(ds, design, w, TRUE_COV)
    assert np.max(np.abs(beta - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))
    scaled = update_beta(ds, design, 7.3 * w, TRUE_COV)
    assert np.max(np.abs(scaled - beta)) <= 1e-10 * max(1.0, np.max(np.abs(beta)))


def test_psi_step_never_decreases_q1(rng):
    ds = simulate_gp_dataset(rng, M=5, n=10)
    design = assemble_design(ds, BasisConfig((-4.0, 4.0), 3, 2))
    beta = update_beta(ds, design, np.ones(5), TRUE_COV)
    start = CovParams(SqExpParams(0.3, [0.2]), [0.05], 0.2)
    w = rng.uniform(0.5, 1.5, 5)
    new, improved = update_psi(ds, design, w, beta, start)
    assert improved
    assert q1(ds, design, beta, new, w) >= q1(ds, design, beta, start, w)
    # a budget of one evaluation can only keep or improve the value
    kept, _ = update_psi(ds, design, w, beta, new, budget=1)
    assert q1(ds, design, beta, kept, w) >= q1(ds, design, beta, new, w) - 1e-12


def test_nu_step_is_monotone(rng):
    ds = simulate_gp_dataset(rng, M=6, n=10, r=rng.gamma(2.0, 0.5, 6))
    design = assemble_design(ds, BasisConfig((-4.0, 4.0), 3, 2))
    beta = update_beta(ds, design, np.ones(6), TRUE_COV)
    for fam in (MixingFamily.student_t(30.0), MixingFamily.slash(5.0),
                MixingFamily.contaminated(0.5, 0.9)):
        new = update_nu(ds, design, beta, TRUE_COV, fam)
        before = marginal_loglik(ds, design, ModelParams(beta, TRUE_COV, fam))
        after = marginal_loglik(ds, design, ModelParams(beta, TRUE_COV, new))
        assert after >= before


def test_gaussian_fit_recovers_covariance(rng):
    ds = simulate_gp_dataset(rng, M=20, n=61)
    res = fit(ds, BasisConfig((-4.0, 4.0), 3, 18), MixingFamily.gaussian(), QUICK)
    assert res.converged
    est = res.params.cov.to_vector()
    true = TRUE_COV.to_vector()
    # broad statistical tolerance on each variance component
    assert np.all(np.abs(np.log(est / true)) < np.log(1.5) + 0.3), est
    assert np.all(res.weights == 1.0)
    t = np.linspace(-4, 4, 61)
    assert np.sqrt(np.mean((res.mean_curve(t) - 0.8 * np.sin((t / 2) ** 3)) ** 2)) < 0.15


def test_t_fit_downweights_an_outlying_subject(rng):
    ds = simulate_gp_dataset(rng, M=12, n=31)
    subjects = list(ds.subjects)
    bumped = dataset_from_arrays([x.id for x in subjects], [x.t for x in subjects],
                                 [x.y + (3.0 if k == 3 else 0.0) * np.sin(x.t)
                                  for k, x in enumerate(subjects)],
                                 W=[x.W for x in subjects], X=[x.X for x in subjects])
    res = fit(bumped, BasisConfig((-4.0, 4.0), 3, 8), MixingFamily.student_t(), QUICK)
    assert int(np.argmin(res.weights)) == 3
    assert res.params.fam.nu < 50


def test_information_and_standard_errors(rng):
    ds = simulate_gp_dataset(rng, M=8, n=15)
    res = fit(ds, BasisConfig((-4.0, 4.0), 3, 2), MixingFamily.student_t())
    assert res.info is not None
    se = res.standard_errors()
    assert se.shape == (res.layout.size,)
    assert np.all(np.isfinite(se)) and np.all(se > 0)
    assert res.bic == pytest.approx(-2 * res.loglik + res.n_free * np.log(ds.n_obs))


def test_non_convergence_is_reported(rng):
    ds = simulate_gp_dataset(rng, M=4, n=10)
    res = fit(ds, BasisConfig((-4.0, 4.0), 3, 2), MixingFamily.student_t(),
              FitConfig(max_outer_iters=1, compute_information=False))
    assert not res.converged and res.iterations == 1
    assert any("no convergence" in w for w in res.warnings)


def test_fixed_covariance_component(rng):
    ds = simulate_gp_dataset(rng, M=5, n=10)
    cfg = FitConfig(psi_free=(True, True, False, True), psi_init=TRUE_COV,
                    compute_information=False)
    res = fit(ds, BasisConfig((-4.0, 4.0), 3, 2), MixingFamily.gaussian(), cfg)
    assert res.params.cov.phi_b[0] == TRUE_COV.phi_b[0]
    assert res.layout.size == res.design.n_beta + 3


def test_fit_is_deterministic(rng):
    ds = simulate_gp_dataset(rng, M=5, n=10)
    a = fit(ds, BasisConfig((-4.0, 4.0), 3, 2), MixingFamily.slash(), QUICK)
    b = fit(ds, BasisConfig((-4.0, 4.0), 3, 2), MixingFamily.slash(), QUICK)
    assert np.array_equal(a.params.beta, b.params.beta)
    assert a.loglik_trace == b.loglik_trace


def test_e_step_weights(rng):
    ds = simulate_gp_dataset(rng, M=3, n=10)
    design = assemble_design(ds, BasisConfig((-4.0, 4.0), 3, 2))
    beta = update_beta(ds, design, np.ones(3), TRUE_COV)
    fam = MixingFamily.student_t(4.0, fixed=True)
    w, d = e_step(ds, design, ModelParams(beta, TRUE_COV, fam))
    assert np.allclose(w, (4.0 + 10) / (4.0 + d))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        e_step(ds, design, ModelParams(beta, TRUE_COV))
