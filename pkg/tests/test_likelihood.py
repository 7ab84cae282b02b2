import numpy as np
import pytest
from scipy import stats

from hpfr.data import BasisConfig, assemble_design
from hpfr.kernels import sigma_from_covariates
from hpfr.likelihood import (ModelParams, ParamLayout, bic, fd_hessian, mahalanobis,
                             marginal_loglik, observed_information, project_pd)
from hpfr.mixing import MixingFamily

from conftest import TRUE_COV, simulate_gp_dataset


@pytest.fixture
def setup(rng):
    ds = simulate_gp_dataset(rng, M=4, n=9)
    design = assemble_design(ds, BasisConfig((-4.0, 4.0), 3, 2))
    beta = rng.standard_normal(design.n_beta) * 0.1
    return ds, design, beta


@pytest.mark.parametrize("fam", [MixingFamily.gaussian(), MixingFamily.student_t(3.5, fixed=True)],
                         ids=["N", "T"])
def test_marginal_loglik_matches_scipy(setup, fam):
    ds, design, beta = setup
    params = ModelParams(beta, TRUE_COV, fam)
    ref = 0.0
    for s, A in zip(ds, design.A):
        S = sigma_from_covariates(s.X, s.W, TRUE_COV)
        mu = A @ beta
        if fam.kind == "N":
            ref += stats.multivariate_normal(mu, S).logpdf(s.y)
        else:
            ref += stats.multivariate_t(mu, S, df=fam.nu).logpdf(s.y)
    assert marginal_loglik(ds, design, params) == pytest.approx(ref, rel=1e-12)


def test_bic_and_mahalanobis(setup):
    ds, design, beta = setup
    params = ModelParams(beta, TRUE_COV)
    ll = marginal_loglik(ds, design, params)
    assert bic(ds, design, params, 7) == pytest.approx(-2 * ll + 7 * np.log(ds.n_obs))
    s, A = ds[0], design.A[0]
    e = s.y - A @ beta
    S = sigma_from_covariates(s.X, s.W, TRUE_COV)
    assert mahalanobis(s, A, params) == pytest.approx(e @ np.linalg.solve(S, e), rel=1e-12)


def test_layout_roundtrip():
    fam = MixingFamily.contaminated(0.2, 0.4)
    lay = ParamLayout.build(3, TRUE_COV, fam)
    params = ModelParams(np.array([1.0, -2.0, 0.5]), TRUE_COV, fam)
    x = lay.pack(params)
    assert lay.size == 3 + 4 + 2 == len(x)
    back = lay.unpack(x, params)
    assert np.allclose(back.cov.to_vector(), TRUE_COV.to_vector(), rtol=1e-14)
    assert back.fam.nu == pytest.approx(0.2) and back.fam.gamma == pytest.approx(0.4)
    assert lay.names[3:] == ["log v0", "log w[0]", "log phi_b[0]", "log phi_eps",
                             "logit nu", "logit gamma"]
    fixed = ParamLayout.build(3, TRUE_COV, MixingFamily.student_t(4.0, fixed=True),
                              psi_free=(True, True, False, True))
    assert fixed.size == 6
    assert fixed.names[-1] == "log phi_eps"


def test_fd_hessian_of_quadratic():
    Q = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 0.5]])
    b = np.array([0.1, -1.0, 2.0])

    def f(x):
        return 0.5 * x @ Q @ x + b @ x

    H, g = fd_hessian(f, np.array([0.5, 0.1, -0.3]))
    assert np.allclose(H, Q, atol=1e-6)
    assert np.allclose(g, Q @ [0.5, 0.1, -0.3] + b, atol=1e-8)


def test_project_pd():
    J = np.diag([4.0, 1.0, -1e-3])
    P, changed = project_pd(J)
    assert changed and np.linalg.eigvalsh(P).min() == pytest.approx(4e-8)
    same, changed = project_pd(np.eye(2))
    assert not changed and np.array_equal(same, np.eye(2))


def test_observed_information_of_gaussian_beta_block(setup):
    """For fixed psi, the beta block of J equals sum A^T Sigma^-1 A exactly."""
    ds, design, beta = setup
    params = ModelParams(beta, TRUE_COV)
    lay = ParamLayout.build(design.n_beta, TRUE_COV, MixingFamily.gaussian())
    info = observed_information(ds, design, params, lay)
    ref = sum(A.T @ np.linalg.solve(sigma_from_covariates(s.X, s.W, TRUE_COV), A)
              for s, A in zip(ds, design.A))
    k = design.n_beta
    assert np.allclose(info.J[:k, :k], ref, rtol=1e-4, atol=1e-4 * np.abs(ref).max())
    assert info.names == tuple(lay.names)
