"""Squared-exponential kernel and the composite subject covariance

    Sigma_m = C_m + W_m diag(phi_b) W_m^T + phi_eps I

together with cross-covariances used for kriging and a Cholesky factor
with a bounded, deterministic jitter policy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from .errors import NumericalError

JITTER_START = 1e-10
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class SqExpParams:
    v0: float
    w: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float)).copy()
        w.setflags(write=False)
        object.__setattr__(self, "v0", float(self.v0))
        object.__setattr__(self, "w", w)
        if not (np.isfinite(self.v0) and self.v0 >= 0):
            raise ValueError(f"v0 must be finite and non-negative, got {self.v0}")
        if not (np.all(np.isfinite(w)) and np.all(w >= 0)):
            raise ValueError(f"kernel weights must be finite and >= 0, got {w}")


@dataclass(frozen=True)
class CovParams:
    """Covariance parameters ``psi = (theta, phi_b, phi_eps)``.

    The flat vector layout used by the optimizers is
    ``[v0, w_1..w_px, phi_1..phi_pw, phi_eps]``.
    """

    theta: SqExpParams
    phi_b: np.ndarray
    phi_eps: float

    def __post_init__(self):
        phi_b = np.atleast_1d(np.asarray(self.phi_b, dtype=float)).copy()
        phi_b.setflags(write=False)
        object.__setattr__(self, "phi_b", phi_b)
        object.__setattr__(self, "phi_eps", float(self.phi_eps))
        if not (np.all(np.isfinite(phi_b)) and np.all(phi_b >= 0)):
            raise ValueError(f"phi_b must be finite and >= 0, got {phi_b}")
        if not (np.isfinite(self.phi_eps) and self.phi_eps > 0):
            raise ValueError(f"phi_eps must be positive, got {self.phi_eps}")

    @property
    def p_x(self):
        return len(self.theta.w)

    @property
    def p_w(self):
        return len(self.phi_b)

    def to_vector(self):
        return np.concatenate([[self.theta.v0], self.theta.w, self.phi_b, [self.phi_eps]])

    @classmethod
    def from_vector(cls, vec, p_x, p_w):
        vec = np.asarray(vec, dtype=float)
        if len(vec) != p_x + p_w + 2:
            raise ValueError(f"psi vector of length {len(vec)} does not match "
                             f"p_x={p_x}, p_w={p_w}")
        return cls(SqExpParams(vec[0], vec[1:1 + p_x]), vec[1 + p_x:1 + p_x + p_w], vec[-1])

    @staticmethod
    def names(p_x, p_w):
        return (["v0"] + [f"w[{k}]" for k in range(p_x)]
                + [f"phi_b[{k}]" for k in range(p_w)] + ["phi_eps"])


def kernel_eval(x, x2, theta):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.shape != theta.w.shape:
        raise ValueError(f"dimension mismatch: {x.shape}, {x2.shape}, w {theta.w.shape}")
    return theta.v0 * float(np.exp(-0.5 * np.sum(theta.w * (x - x2) ** 2)))


def _sqdist(X, X2, w):
    X = np.asarray(X, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X2.ndim == 1:
        X2 = X2[:, None]
    if X.shape[1] != len(w) or X2.shape[1] != len(w):
        raise ValueError(f"inputs have {X.shape[1]}/{X2.shape[1]} columns, kernel expects {len(w)}")
    diff = X[:, None, :] - X2[None, :, :]
    return diff * diff


def cov_matrix(X, theta, X2=None):
    """Kernel matrix between the rows of ``X`` and ``X2`` (default ``X``).

    The elementwise construction makes the square case symmetric bit for
    bit, since ``(a - b)**2 == (b - a)**2`` in floating point.
    """
    sq = _sqdist(X, X if X2 is None else X2, theta.w)
    return theta.v0 * np.exp(-0.5 * (sq @ theta.w))


def _linear_term(W, phi_b, W2=None):
    W = np.asarray(W, dtype=float)
    if W2 is None:
        S = W * np.sqrt(phi_b)
        out = S @ S.T
        return 0.5 * (out + out.T)
    return (W * phi_b) @ np.asarray(W2, dtype=float).T


def composite_sigma(subject, p):
    return sigma_from_covariates(subject.X, subject.W, p)


def sigma_from_covariates(X, W, p, include_noise=True):
    n = len(X)
    S = cov_matrix(X, p.theta)
    if p.p_w:
        S = S + _linear_term(W, p.phi_b)
    if include_noise:
        S = S + p.phi_eps * np.eye(n)
    return S


def sigma_log_gradients(X, W, p):
    """``Sigma`` and its derivatives w.r.t. the log of each psi component
    (vector layout order)."""
    sq = _sqdist(X, X, p.theta.w)
    K = p.theta.v0 * np.exp(-0.5 * (sq @ p.theta.w))
    n = len(K)
    grads = [K]
    for k, wk in enumerate(p.theta.w):
        grads.append(K * (-0.5 * wk * sq[:, :, k]))
    W = np.asarray(W, dtype=float)
    lin = np.zeros((n, n))
    for k, ph in enumerate(p.phi_b):
        outer = ph * np.outer(W[:, k], W[:, k])
        grads.append(outer)
        lin = lin + outer
    grads.append(p.phi_eps * np.eye(n))
    return K + lin + p.phi_eps * np.eye(n), grads


@dataclass(frozen=True)
class Targets:
    """Covariate rows of points to predict (``V`` is only needed for means)."""

    t: np.ndarray
    X: np.ndarray
    W: np.ndarray
    V: np.ndarray = None

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.t, dtype=float))
        n = len(t)
        object.__setattr__(self, "t", t)

        def mat(a):
            if a is None:
                return np.zeros((n, 0))
            a = np.asarray(a, dtype=float)
            return a.reshape(n, -1) if a.ndim == 1 else a
        for name in ("X", "W", "V"):
            object.__setattr__(self, name, mat(getattr(self, name)))

    @property
    def n(self):
        return len(self.t)

    @classmethod
    def from_subject(cls, s, index=None):
        index = slice(None) if index is None else np.asarray(index)
        return cls(s.t[index], s.X[index], s.W[index], s.V[index])


def cross_cov(observed, targets, p, include_noise):
    """Return ``(Sigma*_{M+1}, Sigma*)``.

    ``Sigma*_{M+1}`` (``n_obs x n``) holds covariances between observed and
    target points; the noise variance enters it only where an observed time
    equals a target time exactly and ``include_noise`` is set. ``Sigma*`` is
    the target block, with noise on the diagonal iff ``include_noise``.
    """
    if observed is None or observed.n == 0:
        cross = np.zeros((0, targets.n))
    else:
        if targets.X.shape[1] != observed.X.shape[1] or targets.W.shape[1] != observed.W.shape[1]:
            raise ValueError("target covariates do not match the observed subject")
        cross = cov_matrix(observed.X, p.theta, targets.X)
        if p.p_w:
            cross = cross + _linear_term(observed.W, p.phi_b, targets.W)
        if include_noise:
            cross = cross + p.phi_eps * (observed.t[:, None] == targets.t[None, :])
    star = sigma_from_covariates(targets.X, targets.W, p, include_noise)
    return cross, star


class Factor:
    """Lower Cholesky factor of an SPD matrix with the jitter that was needed."""

    __slots__ = ("L", "jitter", "n")

    def __init__(self, S):
        S = np.asarray(S, dtype=float)
        self.n = len(S)
        self.jitter = 0.0
        if self.n == 0:
            self.L = np.zeros((0, 0))
            return
        try:
            self.L = cholesky(S, lower=True, check_finite=False)
            return
        except LinAlgError:
            pass
        scale = float(np.mean(np.diag(S)))
        if not np.isfinite(scale) or scale <= 0:
            raise NumericalError("covariance has a non-positive or non-finite diagonal")
        rel = JITTER_START
        eye = np.eye(self.n)
        while rel <= JITTER_MAX * (1 + 1e-9):
            try:
                self.L = cholesky(S + rel * scale * eye, lower=True, check_finite=False)
                self.jitter = rel * scale
                return
            except LinAlgError:
                rel *= 10
        raise NumericalError(f"Cholesky failed with jitter up to {JITTER_MAX:g} x mean(diag)")

    def solve(self, b):
        return cho_solve((self.L, True), b, check_finite=False)

    def half_solve(self, b):
        """``L^{-1} b``."""
        return solve_triangular(self.L, b, lower=True, check_finite=False)

    @property
    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def inverse(self):
        return self.solve(np.eye(self.n))

    def mahalanobis(self, e):
        z = self.half_solve(e)
        return float(z @ z)
