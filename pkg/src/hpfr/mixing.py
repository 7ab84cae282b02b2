"""
Latent-scale mixing laws for scale mixtures of Gaussian processes.

Conditionally on a positive latent scale ``r`` a subject's response block is
``N(mu, kappa(r) Sigma)`` with ``kappa(r) = 1 / r``. Four laws for ``r`` are
supported:

==========  ===============================  ==========================
kind        law of ``r``                     marginal process
==========  ===============================  ==========================
``"N"``     point mass at 1                  Gaussian
``"T"``     Gamma(nu/2, rate nu/2)           Student-t
``"SL"``    Beta(nu, 1)                      slash
``"CN"``    P(r=gamma)=nu, P(r=1)=1-nu       contaminated normal
==========  ===============================  ==========================

Given ``n`` observations with Mahalanobis distance ``d`` the posterior of
``r`` is available in closed form for every law:

* T:  ``Gamma((nu + n)/2, rate (nu + d)/2)``
* SL: ``Gamma(n/2 + nu, rate d/2)`` truncated to ``(0, 1]``
* CN: two-point law on ``{gamma, 1}``

The functions below expose the posterior moments ``E[r | y]`` (the E-step
weight), ``E[1/r | y]`` (the predictive-variance multiplier), the marginal
log-density and posterior samplers.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammainc, gammaincinv, gammaln, hyp1f1, logsumexp

from .errors import MomentError

KINDS = ("N", "T", "SL", "CN")
LOG_2PI = float(np.log(2 * np.pi))

# starting values used when a degree parameter is estimated
DEFAULT_INIT = {"T": (4.0, None), "SL": (2.0, None), "CN": (0.1, 0.5)}


@dataclass(frozen=True)
class MixingFamily:
    kind: str = "N"
    nu: float = None
    gamma: float = None
    nu_fixed: bool = True
    gamma_fixed: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mixing family {self.kind!r}; expected one of {KINDS}")
        if self.kind == "N":
            object.__setattr__(self, "nu", None)
            object.__setattr__(self, "gamma", None)
            return
        nu0, g0 = DEFAULT_INIT[self.kind]
        nu = nu0 if self.nu is None else float(self.nu)
        object.__setattr__(self, "nu", nu)
        if not np.isfinite(nu) or nu <= 0:
            raise ValueError(f"degree parameter must be positive, got {nu}")
        if self.kind == "CN":
            g = g0 if self.gamma is None else float(self.gamma)
            object.__setattr__(self, "gamma", g)
            if not (0 < nu <= 1 and 0 < g <= 1):
                raise ValueError(f"contaminated normal needs 0 < nu, gamma <= 1; got {nu}, {g}")
        else:
            object.__setattr__(self, "gamma", None)

    @classmethod
    def gaussian(cls):
        return cls("N")

    @classmethod
    def student_t(cls, nu=None, fixed=False):
        return cls("T", nu, nu_fixed=fixed)

    @classmethod
    def slash(cls, nu=None, fixed=False):
        return cls("SL", nu, nu_fixed=fixed)

    @classmethod
    def contaminated(cls, nu=None, gamma=None, fixed=False):
        return cls("CN", nu, gamma, nu_fixed=fixed, gamma_fixed=fixed)

    @classmethod
    def parse(cls, text):
        """Parse ``"N"``, ``"T"`` (estimated), ``"T4"`` / ``"T=4"`` (fixed),
        ``"SL1.3"``, ``"CN"`` or ``"CN0.1,0.5"``."""
        text = text.strip().upper().replace("=", "")
        for kind in ("SL", "CN", "T", "N"):
            if text.startswith(kind):
                rest = text[len(kind):].strip("()")
                break
        else:
            raise ValueError(f"cannot parse mixing family {text!r}")
        if kind == "N":
            if rest:
                raise ValueError(f"the Gaussian family takes no parameters: {text!r}")
            return cls.gaussian()
        if not rest:
            return cls(kind, nu_fixed=False, gamma_fixed=False)
        vals = [float(v) for v in rest.split(",")]
        if kind == "CN":
            if len(vals) != 2:
                raise ValueError("CN needs two fixed values: CN<nu>,<gamma>")
            return cls.contaminated(vals[0], vals[1], fixed=True)
        return cls(kind, vals[0], nu_fixed=True)

    @property
    def label(self):
        if self.kind == "N":
            return "N"
        if self.kind == "CN":
            return "CN" if not self.nu_fixed else f"CN({self.nu:g},{self.gamma:g})"
        return f"{self.kind}({self.nu:g})" if self.nu_fixed else f"{self.kind}1"

    @property
    def free_names(self):
        names = []
        if self.kind != "N" and not self.nu_fixed:
            names.append("nu")
        if self.kind == "CN" and not self.gamma_fixed:
            names.append("gamma")
        return names

    def free_values(self):
        return np.array([getattr(self, k) for k in self.free_names], dtype=float)

    def with_free(self, values):
        return replace(self, **dict(zip(self.free_names, (float(v) for v in values))))

    def clip(self):
        """Family with estimated parameters clipped into :func:`degree_bounds`."""
        bounds = degree_bounds(self)
        vals = [min(max(v, bounds[k][0]), bounds[k][1])
                for k, v in zip(self.free_names, self.free_values())]
        return self.with_free(vals)


@dataclass(frozen=True)
class ScalePosterior:
    """Posterior of the latent scale given ``n`` observations at
    Mahalanobis distance ``d``."""

    family: MixingFamily
    n: int
    d: float

    def __post_init__(self):
        if self.n < 0 or not self.d >= 0:
            raise ValueError(f"need n >= 0 and d >= 0, got n={self.n}, d={self.d}")


def degree_bounds(fam):
    """Box constraints used when estimating the degree parameters."""
    if fam.kind == "T":
        return {"nu": (0.5, 100.0)}
    if fam.kind == "SL":
        return {"nu": (0.1, 50.0)}
    if fam.kind == "CN":
        return {"nu": (0.01, 1.0), "gamma": (0.01, 1.0)}
    return {}


def _log_trunc_gamma_integral(a, b):
    """``log of int_0^1 r^(a-1) exp(-b r) dr`` for ``a > 0, b >= 0``."""
    if b < a:
        # Kummer: int = exp(-b) 1F1(1; a+1; b) / a; the series is tame for b < a
        return -b - np.log(a) + np.log(hyp1f1(1.0, a + 1.0, b))
    return gammaln(a) + np.log(gammainc(a, b)) - a * np.log(b)


def _cn_posterior(nu, gamma, n, d):
    """Posterior probabilities of ``r = gamma`` and ``r = 1``."""
    log_g = np.log(nu) + 0.5 * n * np.log(gamma) - 0.5 * gamma * d
    log_1 = np.log1p(-nu) - 0.5 * d if nu < 1 else -np.inf
    norm = np.logaddexp(log_g, log_1)
    return np.exp(log_g - norm), np.exp(log_1 - norm)


def posterior_weight(sp):
    """``E[1/kappa(r) | y] = E[r | y]``, the E-step weight."""
    fam, n, d = sp.family, sp.n, float(sp.d)
    if fam.kind == "N":
        return 1.0
    if fam.kind == "T":
        return (fam.nu + n) / (fam.nu + d)
    if fam.kind == "SL":
        a, b = 0.5 * n + fam.nu, 0.5 * d
        return float(np.exp(_log_trunc_gamma_integral(a + 1, b) - _log_trunc_gamma_integral(a, b)))
    p_g, p_1 = _cn_posterior(fam.nu, fam.gamma, n, d)
    return float(p_g * fam.gamma + p_1)


def posterior_kappa_mean(sp):
    """``E[kappa(r) | y] = E[1/r | y]``; raises :class:`MomentError` if infinite."""
    fam, n, d = sp.family, sp.n, float(sp.d)
    if fam.kind == "N":
        return 1.0
    if fam.kind == "T":
        if fam.nu + n <= 2:
            raise MomentError(f"E[1/r | y] is infinite for Student-t with nu={fam.nu}, n={n} "
                              f"(needs nu + n > 2)")
        return (fam.nu + d) / (fam.nu + n - 2)
    if fam.kind == "SL":
        a, b = 0.5 * n + fam.nu, 0.5 * d
        if a <= 1:
            raise MomentError(f"E[1/r | y] is infinite for slash with nu={fam.nu}, n={n} "
                              f"(needs n/2 + nu > 1)")
        return float(np.exp(_log_trunc_gamma_integral(a - 1, b) - _log_trunc_gamma_integral(a, b)))
    p_g, p_1 = _cn_posterior(fam.nu, fam.gamma, n, d)
    return float(p_g / fam.gamma + p_1)


def log_marginal_from(n, d, logdet, fam):
    """Marginal log-density of an ``n``-vector from its Mahalanobis distance
    ``d`` and ``log|Sigma|``. Vectorised over ``n``, ``d`` and ``logdet``."""
    n = np.asarray(n, dtype=float)
    d = np.asarray(d, dtype=float)
    base = -0.5 * (n * LOG_2PI + logdet)
    if fam.kind == "N":
        return base - 0.5 * d
    nu = fam.nu
    if fam.kind == "T":
        return (base + gammaln(0.5 * (nu + n)) - gammaln(0.5 * nu) - 0.5 * n * np.log(0.5 * nu)
                - 0.5 * (nu + n) * np.log1p(d / nu))
    if fam.kind == "SL":
        a = 0.5 * n + nu
        log_int = np.vectorize(_log_trunc_gamma_integral, otypes=[float])(a, 0.5 * d)
        return base + np.log(nu) + log_int
    g = fam.gamma
    comp_g = np.log(nu) + 0.5 * n * np.log(g) - 0.5 * g * d
    comp_1 = np.log1p(-nu) - 0.5 * d if nu < 1 else np.full_like(d, -np.inf)
    return base + np.logaddexp(comp_g, comp_1)


def log_marginal(y_centered, sigma, fam):
    """Marginal log-density of a centred block ``y - mu`` with scale matrix
    ``Sigma`` (an array or a :class:`~hpfr.kernels.Factor`)."""
    from .kernels import Factor

    y = np.atleast_1d(np.asarray(y_centered, dtype=float))
    F = sigma if isinstance(sigma, Factor) else Factor(np.atleast_2d(sigma))
    d = F.mahalanobis(y)
    return float(log_marginal_from(len(y), d, F.logdet, fam))


def sample_posterior_r(sp, rng, size=None):
    """Draw ``r`` from its posterior given ``(n, d)``."""
    fam, n, d = sp.family, sp.n, float(sp.d)
    shape = () if size is None else size
    if fam.kind == "N":
        out = np.ones(shape)
    elif fam.kind == "T":
        out = rng.gamma(0.5 * (fam.nu + n), 1.0 / (0.5 * (fam.nu + d)), size=shape)
    elif fam.kind == "SL":
        out = _sample_trunc_gamma(0.5 * n + fam.nu, 0.5 * d, rng, shape)
    else:
        p_g, _ = _cn_posterior(fam.nu, fam.gamma, n, d)
        out = np.where(rng.random(shape) < p_g, fam.gamma, 1.0)
    return float(out) if size is None else out


def _sample_trunc_gamma(a, b, rng, shape):
    """Gamma(a, rate b) restricted to ``(0, 1]`` by inverting the CDF."""
    u = rng.random(shape)
    mass = gammainc(a, b) if b > 0 else 0.0
    if mass > 1e-250:
        r = gammaincinv(a, u * mass) / b
        return np.clip(r, np.finfo(float).tiny, 1.0)
    # b ~ 0: the law is Beta(a, 1) tilted by exp(-b r) ~ 1; thin it exactly
    out = np.empty(shape).ravel()
    filled = 0
    while filled < out.size:
        k = out.size - filled
        prop = rng.random(k) ** (1.0 / a)
        keep = prop[rng.random(k) < np.exp(-b * prop)]
        out[filled:filled + len(keep)] = keep
        filled += len(keep)
    return out.reshape(shape)


def prior_kappa_mean(fam):
    """``E[1/r]`` under the prior (the unconditioned variance multiplier)."""
    return posterior_kappa_mean(ScalePosterior(fam, 0, 0.0))
