import numpy as np
import pytest

from hpfr.data import BasisConfig, dataset_from_arrays
from hpfr.kernels import CovParams, SqExpParams, sigma_from_covariates

TRUE_COV = CovParams(SqExpParams(0.04, [1.0]), [0.01], 0.01)


def simulate_gp_dataset(rng, M=6, n=15, cov=TRUE_COV, r=None, domain=(-4.0, 4.0)):
    """GP responses around 0.8 sin((t/2)^3) on the usual x = 2.5t, w = 0.5t
    inputs; ``r`` optionally rescales each subject."""
    t = np.linspace(*domain, n)
    X, W = (2.5 * t)[:, None], (0.5 * t)[:, None]
    L = np.linalg.cholesky(sigma_from_covariates(X, W, cov))
    ys = []
    for m in range(M):
        scale = 1.0 if r is None else 1.0 / np.sqrt(r[m])
        ys.append(0.8 * np.sin((0.5 * t) ** 3) + scale * L @ rng.standard_normal(n))
    return dataset_from_arrays([f"s{m}" for m in range(M)], [t] * M, ys,
                               W=[W] * M, X=[X] * M)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_basis():
    return BasisConfig((-4.0, 4.0), 3, 4)
