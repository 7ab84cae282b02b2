"""Marginal log-likelihood, Mahalanobis diagnostics, BIC and the observed
information matrix of the heavy-tailed functional regression model."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import CovParams, Factor, sigma_from_covariates
from .mixing import MixingFamily, log_marginal_from


@dataclass(frozen=True)
class ModelParams:
    """``Theta = (beta, psi, nu)``: stacked mean coefficients
    ``(Vec(B), gamma)``, covariance parameters and the mixing family."""

    beta: np.ndarray
    cov: CovParams
    fam: MixingFamily = field(default_factory=MixingFamily.gaussian)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).copy()
        beta.setflags(write=False)
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta has non-finite entries")
        object.__setattr__(self, "beta", beta)


def factorize(ds, cov):
    """Cholesky factor of ``Sigma_m`` for every subject; subjects with
    identical covariates share one factor."""
    cache = {}
    out = []
    for s, g in zip(ds, ds.groups):
        if g not in cache:
            cache[g] = Factor(sigma_from_covariates(s.X, s.W, cov))
        out.append(cache[g])
    return out


def residuals(ds, design, beta):
    return [s.y - A @ beta for s, A in zip(ds, design.A)]


def mahalanobis(subject, A, params, factor=None):
    """``d_m = (y_m - A_m beta)^T Sigma_m^{-1} (y_m - A_m beta)``."""
    F = factor or Factor(sigma_from_covariates(subject.X, subject.W, params.cov))
    return F.mahalanobis(subject.y - A @ params.beta)


def subject_terms(ds, design, params, factors=None):
    """Per-subject ``(n_m, d_m, log|Sigma_m|)`` arrays."""
    factors = factors or factorize(ds, params.cov)
    res = residuals(ds, design, params.beta)
    n = np.array([s.n for s in ds], dtype=float)
    d = np.array([F.mahalanobis(e) for F, e in zip(factors, res)])
    logdet = np.array([F.logdet for F in factors])
    return n, d, logdet


def marginal_loglik(ds, design, params, factors=None):
    n, d, logdet = subject_terms(ds, design, params, factors)
    # fixed subject order keeps the reduction reproducible
    return float(np.sum(log_marginal_from(n, d, logdet, params.fam)))


def bic(ds, design, params, q, n_obs=None):
    """``-2 loglik + q log(N)`` with ``N`` the total observation count unless
    ``n_obs`` overrides it."""
    N = ds.n_obs if n_obs is None else n_obs
    return -2.0 * marginal_loglik(ds, design, params) + q * np.log(N)


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class ParamLayout:
    """Free-parameter vector ``[beta, log psi_free, g(family)]``.

    Variance components are on the log scale; Student-t and slash degrees on
    the log scale; contaminated-normal ``(nu, gamma)`` on the logit scale.
    """

    n_beta: int
    p_x: int
    p_w: int
    psi_free: tuple
    fam_free: tuple = ()
    fam_kind: str = "N"

    @classmethod
    def build(cls, n_beta, cov, fam, psi_free=None):
        vec = cov.to_vector()
        if psi_free is None:
            psi_free = tuple(bool(v > 0) for v in vec)
        psi_free = tuple(bool(f) for f in psi_free)
        if len(psi_free) != len(vec):
            raise ValueError("psi_free mask has the wrong length")
        if any(f and v <= 0 for f, v in zip(psi_free, vec)):
            raise ValueError("a free covariance component must be strictly positive")
        fam_free = tuple(k for k in fam.free_names
                         if fam.kind != "CN" or getattr(fam, k) < 1.0)
        return cls(n_beta, cov.p_x, cov.p_w, psi_free, fam_free, fam.kind)

    @property
    def psi_index(self):
        return np.flatnonzero(self.psi_free)

    @property
    def size(self):
        return self.n_beta + int(sum(self.psi_free)) + len(self.fam_free)

    @property
    def names(self):
        psi_names = CovParams.names(self.p_x, self.p_w)
        return ([f"beta[{i}]" for i in range(self.n_beta)]
                + [f"log {psi_names[i]}" for i in self.psi_index]
                + [self._fam_transform_name(k) for k in self.fam_free])

    def _fam_transform_name(self, k):
        return f"logit {k}" if self.fam_kind == "CN" else f"log {k}"

    def pack(self, params):
        psi = params.cov.to_vector()[self.psi_index]
        fam = np.array([getattr(params.fam, k) for k in self.fam_free], dtype=float)
        fam = _logit(fam) if self.fam_kind == "CN" else np.log(fam)
        return np.concatenate([params.beta, np.log(psi), fam])

    def unpack(self, vec, template):
        vec = np.asarray(vec, dtype=float)
        i = self.n_beta
        beta = vec[:i]
        k = len(self.psi_index)
        psi = template.cov.to_vector().copy()
        psi[self.psi_index] = np.exp(vec[i:i + k])
        cov = CovParams.from_vector(psi, self.p_x, self.p_w)
        raw = vec[i + k:]
        fam_vals = _expit(raw) if self.fam_kind == "CN" else np.exp(raw)
        fam = template.fam
        if self.fam_free:
            fam = replace(fam, **{n: float(v) for n, v in zip(self.fam_free, fam_vals)})
        return ModelParams(beta, cov, fam)

    def natural_jacobian(self, params):
        """Diagonal of d(natural value)/d(free coordinate) at ``params``."""
        psi = params.cov.to_vector()[self.psi_index]
        fam = np.array([getattr(params.fam, k) for k in self.fam_free], dtype=float)
        dfam = fam * (1 - fam) if self.fam_kind == "CN" else fam
        return np.concatenate([np.ones(self.n_beta), psi, dfam])

    def natural_values(self, params):
        psi = params.cov.to_vector()[self.psi_index]
        fam = np.array([getattr(params.fam, k) for k in self.fam_free], dtype=float)
        return np.concatenate([params.beta, psi, fam])


@dataclass(frozen=True)
class InformationMatrix:
    J: np.ndarray
    names: tuple
    covariance: np.ndarray
    flagged: bool = False
    min_eigenvalue: float = float("nan")
    grad_norm: float = float("nan")

    def standard_errors(self, layout, params):
        """Natural-scale standard errors by the delta method."""
        se = np.sqrt(np.clip(np.diag(self.covariance), 0, None))
        return se * np.abs(layout.natural_jacobian(params))


def fd_steps(x, scale=1.0):
    return scale * np.maximum(1e-5, 1e-4 * np.abs(x))


def fd_hessian(f, x, steps=None):
    """Central-difference Hessian of a scalar function; symmetrised."""
    x = np.asarray(x, dtype=float)
    h = fd_steps(x) if steps is None else np.asarray(steps, dtype=float)
    k = len(x)
    f0 = f(x)
    H = np.empty((k, k))
    fp = np.empty(k)
    fm = np.empty(k)
    E = np.diag(h)
    for i in range(k):
        fp[i] = f(x + E[i])
        fm[i] = f(x - E[i])
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / h[i] ** 2
    for i in range(k):
        for j in range(i + 1, k):
            val = (f(x + E[i] + E[j]) - f(x + E[i] - E[j])
                   - f(x - E[i] + E[j]) + f(x - E[i] - E[j])) / (4 * h[i] * h[j])
            H[i, j] = H[j, i] = val
    grad = (fp - fm) / (2 * h)
    return 0.5 * (H + H.T), grad


def project_pd(J, rel=1e-8):
    """Clip eigenvalues at ``rel * lambda_max``; returns (matrix, changed)."""
    vals, vecs = np.linalg.eigh(J)
    floor = rel * max(vals.max(), np.finfo(float).tiny)
    if vals.min() >= floor:
        return J, False
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T), True


def observed_information(ds, design, params, layout, step_scale=1.0):
    """``J = -Hessian`` of the marginal log-likelihood on the free-parameter
    scale, by central finite differences."""
    x0 = layout.pack(params)

    def f(x):
        try:
            return marginal_loglik(ds, design, layout.unpack(x, params))
        except (ValueError, ArithmeticError):
            return -np.inf

    H, grad = fd_hessian(f, x0, fd_steps(x0, step_scale))
    J = -H
    if not np.all(np.isfinite(J)):
        raise ArithmeticError("non-finite log-likelihood while differencing")
    min_eig = float(np.linalg.eigvalsh(J).min())
    Jpd, flagged = project_pd(J)
    cov = np.linalg.inv(Jpd)
    return InformationMatrix(J, tuple(layout.names), 0.5 * (cov + cov.T), flagged, min_eig,
                             float(np.linalg.norm(grad)))
