"""
Subject-specific prediction by kriging, with three kinds of pointwise
prediction interval:

``PL0``
    normal approximation with the plug-in conditional mean and variance;
``PL1``
    quantiles of the plug-in predictive distribution, sampled by drawing
    the latent scale from its posterior and then the Gaussian conditional;
``BTS``
    parametric bootstrap: parameters are drawn from ``N(theta_hat, J^-1)``
    on the free (log / logit) scale and ``B`` predictive draws are taken
    for each of ``J`` parameter draws.

Targets are either responses ``y*`` (noise included) or the noise-free
random term ``tau(t)`` of a subject.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import mean_design
from .errors import MomentError, NumericalError
from .kernels import Factor, Targets, cross_cov, sigma_from_covariates
from .mixing import ScalePosterior, posterior_kappa_mean, sample_posterior_r

METHODS = ("PL0", "PL1", "BTS")


@dataclass(frozen=True)
class KrigingState:
    """Gaussian conditional of the targets given the observed block, before
    scaling by the latent ``kappa(r)``."""

    mean: np.ndarray
    cov: np.ndarray
    prior_mean: np.ndarray
    n_obs: int
    d: float


@dataclass
class PredictionResult:
    t: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    intervals: dict = field(default_factory=dict)
    draws: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def bounds(self, method, ncl):
        return self.intervals[(method, _ncl_key(ncl))]


def _ncl_key(ncl):
    return round(float(ncl), 10)


@dataclass(frozen=True)
class PredictionJob:
    """One conditioning problem: an observed block (possibly empty) and the
    target points. ``kind`` is ``"response"`` or ``"random_term"``."""

    obs: object
    targets: Targets
    u: np.ndarray
    kind: str = "response"
    noisy: bool = False

    def __post_init__(self):
        if self.kind not in ("response", "random_term"):
            raise ValueError(f"unknown prediction target {self.kind!r}")
        if self.u is None:
            if self.obs is None:
                raise ValueError("u is required when there are no observations")
            object.__setattr__(self, "u", self.obs.u)
        object.__setattr__(self, "u", np.atleast_1d(np.asarray(self.u, dtype=float)))

    @property
    def include_noise(self):
        return self.kind == "response" or self.noisy

    @property
    def n_obs(self):
        return 0 if self.obs is None else self.obs.n

    def key(self):
        o = self.obs
        obs_key = None if o is None else (o.t.tobytes(), o.X.tobytes(), o.W.tobytes(), o.X.shape)
        tg = self.targets
        return (obs_key, tg.t.tobytes(), tg.X.tobytes(), tg.W.tobytes(), tg.X.shape,
                self.include_noise)


class _Conditioner:
    """Kriging at fixed parameters; covariance algebra is cached per
    covariate configuration so subjects sharing a design reuse it."""

    def __init__(self, params, basis, designs=None):
        self.params = params
        self.basis = basis
        self._geo = {}
        # mean designs do not depend on the parameters and may be shared
        self._designs = {} if designs is None else designs

    def _designs_for(self, job):
        k = id(job)
        if k not in self._designs:
            A_obs = (None if job.obs is None else
                     mean_design(self.basis, job.obs.t, job.u, job.obs.V))
            A_tgt = (mean_design(self.basis, job.targets.t, job.u, job.targets.V)
                     if job.kind == "response" else None)
            self._designs[k] = (A_obs, A_tgt)
        return self._designs[k]

    def _geometry(self, job):
        key = job.key()
        if key not in self._geo:
            cov = self.params.cov
            cross, star = cross_cov(job.obs, job.targets, cov, job.include_noise)
            if job.n_obs:
                F = Factor(sigma_from_covariates(job.obs.X, job.obs.W, cov))
                K = F.solve(cross)
                schur = star - cross.T @ K
                schur = 0.5 * (schur + schur.T)
            else:
                F, K, schur = None, None, star
            self._geo[key] = [F, K, schur, None]
        return self._geo[key]

    def state(self, job):
        F, K, schur, _ = self._geometry(job)
        A_obs, A_tgt = self._designs_for(job)
        beta = self.params.beta
        prior = A_tgt @ beta if A_tgt is not None else np.zeros(job.targets.n)
        if job.n_obs:
            e = job.obs.y - A_obs @ beta
            d = F.mahalanobis(e)
            mean = prior + K.T @ e
        else:
            d, mean = 0.0, prior.copy()
        return KrigingState(mean, schur, prior, job.n_obs, d)

    def root(self, job):
        geo = self._geometry(job)
        if geo[3] is None:
            geo[3] = _cov_root(geo[2])
        return geo[3]


def _cov_root(S):
    """Matrix ``R`` with ``R R^T ~= S`` for a PSD ``S``."""
    if len(S) == 0:
        return np.zeros((0, 0))
    try:
        return Factor(S).L
    except NumericalError:
        vals, vecs = np.linalg.eigh(S)
        return vecs * np.sqrt(np.clip(vals, 0, None))


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _job(obs, targets, params, u, kind, noisy=False):
    return PredictionJob(obs, targets, u, kind, noisy)


def conditional_mean(obs, targets, params, basis, kind="response", u=None):
    """``mu* + Sigma*^T Sigma^{-1} (y - mu)``; the same for every family."""
    return _Conditioner(params, basis).state(_job(obs, targets, params, u, kind)).mean


def conditional_variance(obs, targets, params, basis, kind="response", u=None):
    """``E[kappa(r) | y] * diag(Sigma* - Sigma*^T Sigma^{-1} Sigma*)``."""
    st = _Conditioner(params, basis).state(_job(obs, targets, params, u, kind))
    mult = posterior_kappa_mean(ScalePosterior(params.fam, st.n_obs, st.d))
    return mult * np.clip(np.diag(st.cov), 0, None)


def interval_pl0(mean, variance, ncls):
    """``mean +- z_{(1+ncl)/2} sqrt(variance)`` for each nominal level."""
    sd = np.sqrt(np.clip(np.asarray(variance, dtype=float), 0, None))
    out = {}
    for c in ncls:
        z = norm.ppf(0.5 + 0.5 * c)
        out[_ncl_key(c)] = (mean - z * sd, mean + z * sd)
    return out


def _quantile_bands(draws, ncls):
    out = {}
    for c in ncls:
        lo, hi = np.quantile(draws, [0.5 - 0.5 * c, 0.5 + 0.5 * c], axis=0)
        out[_ncl_key(c)] = (lo, hi)
    return out


def _sample(state, root, fam, size, rng):
    r = sample_posterior_r(ScalePosterior(fam, state.n_obs, state.d), rng, size=size)
    z = rng.standard_normal((size, len(state.mean)))
    return state.mean + (z @ root.T) / np.sqrt(r)[:, None]


def interval_pl1(obs, targets, params, basis, ncls, kind="response", u=None,
                 n_draws=10_000, rng=None, return_draws=False):
    """Quantiles of the plug-in predictive distribution by Monte Carlo."""
    rng = _rng(rng)
    cond = _Conditioner(params, basis)
    job = _job(obs, targets, params, u, kind)
    draws = _sample(cond.state(job), cond.root(job), params.fam, n_draws, rng)
    bands = _quantile_bands(draws, ncls)
    return (bands, draws) if return_draws else bands


def _param_root(fit, param_cov):
    C = fit.info.covariance if param_cov is None else np.asarray(param_cov, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
    return vecs * np.sqrt(np.clip(vals, 0, None))


def bootstrap_draws(fit, jobs, J=50, B=20, rng=None, param_cov=None):
    """Pooled ``J * B`` bootstrap draws for each job.

    Every parameter draw is shared by all jobs. A draw that produces an
    invalid model is retried once with a fresh draw and otherwise skipped.
    Returns ``(draws_per_job, skipped)``.
    """
    rng = _rng(rng)
    if param_cov is None and fit.info is None:
        raise ValueError("bootstrap needs an information matrix (fit with "
                         "compute_information=True) or an explicit param_cov")
    layout, params = fit.layout, fit.params
    theta = layout.pack(params)
    R = _param_root(fit, param_cov)
    out = [[] for _ in jobs]
    designs = {}
    skipped = 0
    for _ in range(J):
        for attempt in range(2):
            x = theta + R @ rng.standard_normal(len(theta))
            try:
                with np.errstate(over="ignore"):
                    pj = layout.unpack(x, params)
                pj = type(pj)(pj.beta, pj.cov, pj.fam.clip())
                cond = _Conditioner(pj, fit.basis, designs)
                batch = [_sample(cond.state(job), cond.root(job), pj.fam, B, rng) for job in jobs]
            except (NumericalError, MomentError, ValueError, FloatingPointError):
                continue
            for acc, b in zip(out, batch):
                acc.append(b)
            break
        else:
            skipped += 1
    if not out[0]:
        raise NumericalError("every bootstrap parameter draw failed")
    return [np.vstack(acc) for acc in out], skipped


def interval_bts(fit, obs, targets, ncls, kind="response", u=None, J=50, B=20, rng=None,
                 param_cov=None, return_draws=False):
    job = PredictionJob(obs, targets, u, kind)
    (draws,), skipped = bootstrap_draws(fit, [job], J, B, rng, param_cov)
    bands = _quantile_bands(draws, ncls)
    return (bands, draws) if return_draws else bands


def predict_jobs(fit, jobs, ncls=(0.8, 0.9, 0.95), methods=METHODS, J=50, B=20,
                 n_draws=10_000, rng=None, keep_draws=False, param_cov=None):
    """Means, variances and intervals for several jobs sharing one fit.

    ``PL1`` draws are taken first, then the bootstrap, all from ``rng``, so
    results are reproducible from a seed.
    """
    rng = _rng(rng)
    params = fit.params
    cond = _Conditioner(params, fit.basis)
    results = []
    for job in jobs:
        st = cond.state(job)
        mult = posterior_kappa_mean(ScalePosterior(params.fam, st.n_obs, st.d))
        var = mult * np.clip(np.diag(st.cov), 0, None)
        res = PredictionResult(job.targets.t, st.mean, var)
        if "PL0" in methods:
            for c, band in interval_pl0(st.mean, var, ncls).items():
                res.intervals[("PL0", c)] = band
        if "PL1" in methods:
            draws = _sample(st, cond.root(job), params.fam, n_draws, rng)
            for c, band in _quantile_bands(draws, ncls).items():
                res.intervals[("PL1", c)] = band
            if keep_draws:
                res.draws["PL1"] = draws
        results.append(res)
    if "BTS" in methods:
        all_draws, skipped = bootstrap_draws(fit, jobs, J, B, rng, param_cov)
        for res, draws in zip(results, all_draws):
            for c, band in _quantile_bands(draws, ncls).items():
                res.intervals[("BTS", c)] = band
            res.diagnostics["bts_skipped"] = skipped
            if keep_draws:
                res.draws["BTS"] = draws
    return results


def predict_random_terms(fit, subject_index, targets=None, ncls=(0.8, 0.9, 0.95),
                         methods=METHODS, noisy=False, **kwargs):
    """Predict the random term ``tau_m`` of a fitted subject (default: at its
    observation points). ``noisy=True`` targets ``tau + eps`` instead."""
    s = fit.data[subject_index]
    targets = Targets.from_subject(s) if targets is None else targets
    job = PredictionJob(s, targets, s.u, "random_term", noisy)
    return predict_jobs(fit, [job], ncls, methods, **kwargs)[0]


def predict_new_subject(fit, obs, targets, u=None, ncls=(0.8, 0.9, 0.95), methods=METHODS,
                        **kwargs):
    """Predict responses of a subject outside the training set from its
    (possibly empty) partial observations ``obs``."""
    if obs is not None and obs.n == 0:
        obs = None
    job = PredictionJob(obs, targets, u, "response")
    return predict_jobs(fit, [job], ncls, methods, **kwargs)[0]
