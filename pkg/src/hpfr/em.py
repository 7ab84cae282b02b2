"""
ECME fitting of the heavy-tailed functional regression model.

One outer iteration runs

1. E-step: weights ``pi_m = E[r_m | y_m]`` at the current parameters;
2. closed-form weighted GLS update of ``beta``;
3. update of the covariance parameters ``psi`` by maximising
   ``Q1 = -1/2 sum log|Sigma_m| - 1/2 sum pi_m e_m^T Sigma_m^{-1} e_m``;
4. update of the degree parameters by maximising the actual marginal
   log-likelihood (skipped when they are fixed).

Steps 2 and 3 only accept points that do not decrease ``Q1`` and step 4
only accepts points that do not decrease the marginal log-likelihood, so
the marginal log-likelihood trace is non-decreasing.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .data import assemble_design, mean_design
from .errors import NumericalError
from .kernels import CovParams, Factor, SqExpParams, sigma_log_gradients
from .likelihood import (ModelParams, ParamLayout, bic, factorize, marginal_loglik,
                         observed_information, residuals, subject_terms)
from .mixing import ScalePosterior, degree_bounds, log_marginal_from, posterior_weight


@dataclass(frozen=True)
class FitConfig:
    max_outer_iters: int = 500
    param_tol: float = 1e-6
    loglik_tol: float = 1e-8
    psi_optimizer_budget: int = 200
    cm_passes: int = 1
    stall_cycles: int = 3
    psi_free: tuple = None
    psi_init: CovParams = None
    log_psi_bounds: tuple = (-23.0, 12.0)
    nu_xtol: float = 1e-6
    ridge: float = 1e-8
    compute_information: bool = True

    def __post_init__(self):
        if self.param_tol <= 0 or self.loglik_tol <= 0:
            raise ValueError("tolerances must be positive")
        if min(self.max_outer_iters, self.psi_optimizer_budget, self.cm_passes,
               self.stall_cycles) < 1:
            raise ValueError("iteration budgets must be >= 1")


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    weights: np.ndarray
    mahalanobis: np.ndarray
    loglik_trace: tuple
    info: object
    converged: bool
    iterations: int
    layout: ParamLayout
    design: object
    data: object
    warnings: tuple = ()

    @property
    def loglik(self):
        return self.loglik_trace[-1]

    @property
    def n_free(self):
        return self.layout.size

    @property
    def bic(self):
        return -2.0 * self.loglik + self.n_free * np.log(self.data.n_obs)

    @property
    def basis(self):
        return self.design.basis

    def mean_curve(self, t, u=None, V=None):
        """Marginal mean ``A(t) beta`` at times ``t`` for covariates ``u, V``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        u = np.ones(self.design.p_u) if u is None else u
        V = np.zeros((len(t), self.design.p_v)) if V is None else V
        return mean_design(self.basis, t, u, V) @ self.params.beta

    def standard_errors(self):
        if self.info is None:
            return None
        return self.info.standard_errors(self.layout, self.params)


def _solve_normal(N, rhs, ridge, force_ridge):
    if force_ridge:
        return np.linalg.solve(N + ridge * np.eye(len(N)), rhs), True
    try:
        sol = np.linalg.solve(N, rhs)
        if np.all(np.isfinite(sol)) and np.linalg.cond(N) < 1e14:
            return sol, False
    except np.linalg.LinAlgError:
        pass
    return np.linalg.solve(N + ridge * np.eye(len(N)), rhs), True


def init_beta(ds, design, ridge=1e-8):
    """Ordinary least squares with ``Sigma_m = I`` and unit weights."""
    A = np.vstack(design.A)
    y = np.concatenate([s.y for s in ds])
    if design.rank_deficient:
        return _solve_normal(A.T @ A, A.T @ y, ridge, True)[0]
    return np.linalg.lstsq(A, y, rcond=None)[0]


def e_step(ds, design, params, factors=None):
    """E-step weights ``pi_m`` and the Mahalanobis distances they use."""
    n, d, _ = subject_terms(ds, design, params, factors)
    w = np.array([posterior_weight(ScalePosterior(params.fam, int(nm), dm))
                  for nm, dm in zip(n, d)])
    return w, d


def update_beta(ds, design, weights, cov, factors=None, ridge=1e-8, return_flag=False):
    """``beta = [sum pi A^T S^-1 A]^{-1} [sum pi A^T S^-1 y]``."""
    factors = factors or factorize(ds, cov)
    p = design.n_beta
    N = np.zeros((p, p))
    rhs = np.zeros(p)
    for s, A, F, w in zip(ds, design.A, factors, weights):
        Z = F.half_solve(A)
        z = F.half_solve(s.y)
        N += w * (Z.T @ Z)
        rhs += w * (Z.T @ z)
    N = 0.5 * (N + N.T)
    beta, ridged = _solve_normal(N, rhs, ridge, design.rank_deficient)
    if ridged:
        warnings.warn("GLS normal matrix is singular; ridge jitter applied",
                      RuntimeWarning, stacklevel=2)
    return (beta, ridged) if return_flag else beta


def q1(ds, design, beta, cov, weights):
    """Expected complete-data log-likelihood in ``(beta, psi)`` (up to
    constants)."""
    val = 0.0
    for F, e, w in zip(factorize(ds, cov), residuals(ds, design, beta), weights):
        val -= 0.5 * (F.logdet + w * F.mahalanobis(e))
    return val


class _GroupedQ1:
    """``-Q1`` and its gradient over the free log covariance parameters,
    sharing work between subjects with identical covariates."""

    def __init__(self, ds, design, beta, weights, template, free):
        self.template = template
        self.free = np.asarray(free, dtype=bool)
        self.groups = {}
        for s, g, e, w in zip(ds, ds.groups, residuals(ds, design, beta), weights):
            if g not in self.groups:
                self.groups[g] = [s.X, s.W, 0, np.zeros((s.n, s.n))]
            entry = self.groups[g]
            entry[2] += 1
            entry[3] += w * np.outer(e, e)

    def cov(self, u):
        vec = self.template.to_vector().copy()
        vec[self.free] = np.exp(u)
        return CovParams.from_vector(vec, self.template.p_x, self.template.p_w)

    def __call__(self, u):
        cov = self.cov(u)
        val = 0.0
        grad = np.zeros(int(self.free.sum()))
        try:
            for X, W, count, S in self.groups.values():
                sigma, dsig = sigma_log_gradients(X, W, cov)
                F = Factor(sigma)
                inv = F.inverse()
                val += 0.5 * (count * F.logdet + np.sum(inv * S))
                G = count * inv - inv @ S @ inv
                for j, k in enumerate(np.flatnonzero(self.free)):
                    grad[j] += 0.5 * np.sum(G * dsig[k])
        except NumericalError:
            return 1e300, np.zeros_like(grad)
        return val, grad


def update_psi(ds, design, weights, beta, cov, budget=200, free=None,
               log_bounds=(-23.0, 12.0)):
    """Maximise ``Q1`` over the free covariance parameters on the log scale.

    Returns ``(cov, improved)``; the entry value is returned unchanged when
    the optimiser does not improve ``Q1``.
    """
    vec = cov.to_vector()
    free = np.asarray([v > 0 for v in vec] if free is None else free, dtype=bool)
    if not free.any():
        return cov, False
    obj = _GroupedQ1(ds, design, beta, weights, cov, free)
    u0 = np.clip(np.log(vec[free]), *log_bounds)
    f0 = obj(np.log(vec[free]))[0]
    res = minimize(obj, u0, jac=True, method="L-BFGS-B",
                   bounds=[log_bounds] * len(u0),
                   options={"maxfun": budget, "maxiter": budget})
    if np.all(np.isfinite(res.x)) and res.fun <= f0:
        return obj.cov(res.x), bool(res.fun < f0)
    return cov, False


def update_nu(ds, design, beta, cov, fam, factors=None, xtol=1e-6):
    """Maximise the marginal log-likelihood over the estimated degree
    parameters inside :func:`~hpfr.mixing.degree_bounds`."""
    names = fam.free_names
    if not names:
        return fam
    n, d, logdet = subject_terms(ds, design, ModelParams(beta, cov, fam), factors)

    def loglik(f):
        return float(np.sum(log_marginal_from(n, d, logdet, f)))

    bounds = degree_bounds(fam)
    current = loglik(fam)
    if fam.kind in ("T", "SL"):
        lo, hi = bounds["nu"]
        res = minimize_scalar(lambda x: -loglik(fam.with_free([np.exp(x)])),
                              bounds=(np.log(lo), np.log(hi)), method="bounded",
                              options={"xatol": xtol})
        cand = fam.with_free([float(np.clip(np.exp(res.x), lo, hi))])
    else:
        box = [bounds[k] for k in names]
        x0 = np.clip(fam.free_values(), [b[0] for b in box], [b[1] for b in box])
        res = minimize(lambda x: -loglik(fam.with_free(np.clip(x, [b[0] for b in box],
                                                                 [b[1] for b in box]))),
                       x0, method="Nelder-Mead", bounds=box,
                       options={"xatol": xtol, "fatol": 1e-10, "maxiter": 400})
        cand = fam.with_free(np.clip(res.x, [b[0] for b in box], [b[1] for b in box]))
    return cand if loglik(cand) >= current else fam


def _initial_psi(ds, design, beta, config, p_x, p_w):
    """Multi-start maximisation of ``Q1`` at ``beta`` with unit weights."""
    ones = np.ones(ds.M)
    if config.psi_init is not None:
        starts = [config.psi_init]
    else:
        e = np.concatenate(residuals(ds, design, beta))
        s2 = max(float(np.mean(e ** 2)), 1e-12)
        X = np.vstack([s.X for s in ds])
        W = np.vstack([s.W for s in ds])
        span = np.ptp(X, axis=0) if len(X) else np.ones(p_x)
        span = np.where(span > 0, span, 1.0)
        w2 = np.mean(W ** 2, axis=0) if p_w else np.zeros(0)
        phi_b = 0.25 * s2 / np.where(w2 > 0, w2, 1.0)
        starts = [CovParams(SqExpParams(0.5 * s2, 1.0 / (frac * span) ** 2), phi_b, 0.25 * s2)
                  for frac in (0.05, 0.1, 0.25, 0.6)]
    best, best_val = None, -np.inf
    for start in starts:
        cov, _ = update_psi(ds, design, ones, beta, start, config.psi_optimizer_budget,
                            config.psi_free, config.log_psi_bounds)
        val = q1(ds, design, beta, cov, ones)
        if val > best_val:
            best, best_val = cov, val
    return best


def fit(ds, basis, fam, config=None):
    """Fit the model by ECME. Non-convergence is reported through
    ``FitResult.converged``, never raised."""
    config = config or FitConfig()
    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        design = assemble_design(ds, basis)
        beta = init_beta(ds, design, config.ridge)
        cov = _initial_psi(ds, design, beta, config, ds.p_x, ds.p_w)
        params = ModelParams(beta, cov, fam)
        layout = ParamLayout.build(design.n_beta, cov, fam, config.psi_free)

        ll = marginal_loglik(ds, design, params)
        trace = [ll]
        converged = False
        stall = 0
        it = 0
        for it in range(1, config.max_outer_iters + 1):
            x_prev = layout.pack(params)
            factors = factorize(ds, params.cov)
            weights, _ = e_step(ds, design, params, factors)
            beta, cov = params.beta, params.cov
            for _ in range(config.cm_passes):
                beta = update_beta(ds, design, weights, cov, factors, config.ridge)
                cov, _ = update_psi(ds, design, weights, beta, cov,
                                    config.psi_optimizer_budget, layout.psi_free,
                                    config.log_psi_bounds)
                factors = factorize(ds, cov)
            fam_new = update_nu(ds, design, beta, cov, params.fam, factors, config.nu_xtol)
            params = ModelParams(beta, cov, fam_new)
            ll_new = marginal_loglik(ds, design, params, factors)
            trace.append(ll_new)
            step = float(np.max(np.abs(layout.pack(params) - x_prev)))
            gain = ll_new - ll
            ll = ll_new
            if step < config.param_tol:
                converged = True
                break
            stall = stall + 1 if gain < config.loglik_tol * max(abs(ll), 1.0) else 0
            if stall >= config.stall_cycles:
                converged = True
                break

        factors = factorize(ds, params.cov)
        weights, d = e_step(ds, design, params, factors)
        info = None
        if config.compute_information:
            try:
                info = observed_information(ds, design, params, layout)
                if info.flagged:
                    notes.append("observed information not positive definite; "
                                 "eigenvalues clipped")
            except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                notes.append(f"observed information unavailable: {exc}")
    notes.extend(sorted({str(w.message) for w in caught}))
    if not converged:
        notes.append(f"no convergence after {config.max_outer_iters} iterations")
    return FitResult(params, weights, d, tuple(trace), info, converged, it, layout, design,
                     ds, tuple(notes))


def model_bic(result):
    return bic(result.data, result.design, result.params, result.n_free)
