"""Residual distributions.

The working distribution for standardized residuals is the delta-Laplace
(generalized Gaussian) family, which contains the Laplace (delta = 1) and
the Gaussian (delta = 2, with scale sqrt(2) times the usual standard
deviation) as special cases.  Dependence between residuals at different
lags is described by a Gaussian copula whose precision matrix comes from
conditioning a banded first-order autoregressive precision on the value at
lag zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, inv, solve
from scipy.optimize import minimize
from scipy.special import gammainc, gammaincinv, gammaln, ndtr, ndtri

from .errors import FitError, InputError

__all__ = [
    "DeltaLaplaceParams",
    "dl_log_density",
    "dl_cdf",
    "dl_quantile",
    "dl_sample",
    "dl_mle",
    "build_conditional_precision",
    "correlation_from_precision",
    "ResidualCopula",
    "gaussian_copula_sample",
]


@dataclass(frozen=True)
class DeltaLaplaceParams:
    """Location ``mu``, scale ``sigma`` > 0 and shape ``delta`` > 0."""

    mu: float
    sigma: float
    delta: float

    def __post_init__(self):
        if not np.isfinite(self.mu):
            raise InputError(f"delta-Laplace location must be finite, got {self.mu}")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise InputError(f"delta-Laplace scale must be positive, got {self.sigma}")
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise InputError(f"delta-Laplace shape must be positive, got {self.delta}")


def _log_norm_const(params):
    # log of delta / (2 sigma Gamma(1/delta))
    return (
        np.log(params.delta)
        - np.log(2.0)
        - np.log(params.sigma)
        - gammaln(1.0 / params.delta)
    )


def dl_log_density(z, params):
    """Log density of the delta-Laplace distribution, elementwise in ``z``."""
    z = np.asarray(z, dtype=float)
    t = np.abs(z - params.mu) / params.sigma
    return _log_norm_const(params) - t**params.delta


def dl_cdf(z, params):
    """Distribution function, elementwise in ``z``.

    Uses the regularized lower incomplete gamma function: for z above the
    location the cdf is 1/2 + P(1/delta, |(z-mu)/sigma|^delta) / 2, with the
    mirrored expression below.
    """
    z = np.asarray(z, dtype=float)
    t = np.abs(z - params.mu) / params.sigma
    core = gammainc(1.0 / params.delta, t**params.delta)
    return 0.5 + 0.5 * np.sign(z - params.mu) * core


def dl_quantile(q, params):
    """Quantile function, elementwise in ``q`` (0 < q < 1)."""
    q = np.asarray(q, dtype=float)
    if np.any((q <= 0.0) | (q >= 1.0)):
        raise InputError("quantile levels must lie strictly inside (0, 1)")
    s = 2.0 * q - 1.0
    core = gammaincinv(1.0 / params.delta, np.abs(s)) ** (1.0 / params.delta)
    return params.mu + params.sigma * np.sign(s) * core


def dl_sample(params, rng, size=None):
    """Draw samples: mu + sigma * S * W**(1/delta) with S a random sign and
    W gamma(1/delta, 1)."""
    signs = rng.integers(0, 2, size=size) * 2 - 1
    w = rng.standard_gamma(1.0 / params.delta, size=size)
    return params.mu + params.sigma * signs * w ** (1.0 / params.delta)


def _dl_start(z):
    """Moment-based starting point (mu0, log sigma0, log delta0)."""
    mu0 = float(np.mean(z))
    sd = float(np.std(z))
    if sd == 0.0:
        raise InputError("degenerate sample: zero variance")
    # ratio E|Z-mu| / sd identifies delta; invert on a coarse grid
    ratio = float(np.mean(np.abs(z - mu0))) / sd
    grid = np.exp(np.linspace(np.log(0.25), np.log(8.0), 60))
    rgrid = np.exp(
        gammaln(2.0 / grid) - 0.5 * gammaln(1.0 / grid) - 0.5 * gammaln(3.0 / grid)
    )
    delta0 = float(grid[np.argmin(np.abs(rgrid - ratio))])
    # match the variance: Var = sigma^2 Gamma(3/d) / Gamma(1/d)
    sigma0 = sd * np.exp(0.5 * (gammaln(1.0 / delta0) - gammaln(3.0 / delta0)))
    return np.array([mu0, np.log(sigma0), np.log(delta0)])


def _dl_mean_nll(theta, z):
    mu, log_sigma, log_delta = theta
    if abs(log_delta) > 4.0 or abs(log_sigma) > 40.0:
        return np.inf
    sigma = np.exp(log_sigma)
    delta = np.exp(log_delta)
    t = np.abs(z - mu) / sigma
    val = (
        -np.log(delta)
        + np.log(2.0)
        + log_sigma
        + gammaln(1.0 / delta)
        + np.mean(t**delta)
    )
    return val if np.isfinite(val) else np.inf


def _dl_mle_core(z, start=None, xatol=1e-6, fatol=1e-10, maxiter=2000):
    theta0 = _dl_start(z) if start is None else np.asarray(start, dtype=float)
    with np.errstate(invalid="ignore"):
        res = minimize(
            _dl_mean_nll,
            theta0,
            args=(z,),
            method="Nelder-Mead",
            options={"xatol": xatol, "fatol": fatol, "maxiter": maxiter, "maxfev": maxiter},
        )
    return res


def dl_mle(z, start=None):
    """Maximum likelihood fit of (mu, sigma, delta) to a sample ``z``.

    Optimizes over (mu, log sigma, log delta) with a derivative-free
    simplex from a moment-based start.

    Raises
    ------
    InputError
        If the sample is degenerate (zero variance) or too small.
    FitError
        If the search does not converge; the best point seen is attached.
    """
    z = np.asarray(z, dtype=float)
    if z.size < 4:
        raise InputError(f"need at least 4 observations to fit, got {z.size}")
    if float(np.std(z)) == 0.0:
        raise InputError("degenerate sample: zero variance")
    res = _dl_mle_core(z, start=start)
    params = DeltaLaplaceParams(
        float(res.x[0]), float(np.exp(res.x[1])), float(np.exp(res.x[2]))
    )
    if not res.success:
        raise FitError(
            f"delta-Laplace fit did not converge: {res.message}",
            best=params,
            best_value=float(res.fun) * z.size,
        )
    return params


def build_conditional_precision(rho, k):
    """Precision matrix of k consecutive values of a unit-lag-rho AR(1)
    given the value immediately before them.

    The banded (k+1) x (k+1) precision (up to a constant factor) has 1 at
    both ends of the diagonal, 1 + rho^2 inside, and -rho on the first
    off-diagonals; conditioning removes its first row and column.
    """
    if not (np.isfinite(rho) and -1.0 < rho < 1.0):
        raise InputError(f"autoregression coefficient must be in (-1, 1), got {rho}")
    if k < 1:
        raise InputError(f"dimension must be at least 1, got {k}")
    q = np.zeros((k + 1, k + 1))
    idx = np.arange(k + 1)
    q[idx, idx] = 1.0 + rho**2
    q[0, 0] = 1.0
    q[k, k] = 1.0
    q[idx[:-1], idx[:-1] + 1] = -rho
    q[idx[:-1] + 1, idx[:-1]] = -rho
    return q[1:, 1:]


def correlation_from_precision(q):
    """Invert a precision matrix and rescale it to unit diagonal."""
    cov = inv(q)
    d = np.sqrt(np.diag(cov))
    return cov / np.outer(d, d)


@dataclass(frozen=True)
class ResidualCopula:
    """Dependence model for a residual vector.

    ``kind`` is ``"independence"`` or ``"gaussian_ar1_conditional"``; the
    latter uses :func:`build_conditional_precision` with coefficient
    ``rho`` in (-1, 1).  ``dim`` is the vector length.
    """

    kind: str
    dim: int
    rho: float = 0.0

    def __post_init__(self):
        if self.kind not in ("independence", "gaussian_ar1_conditional"):
            raise InputError(f"unknown copula kind {self.kind!r}")
        if self.dim < 1:
            raise InputError(f"copula dimension must be >= 1, got {self.dim}")
        if self.kind == "gaussian_ar1_conditional" and not (-1.0 < self.rho < 1.0):
            raise InputError(f"copula coefficient must be in (-1, 1), got {self.rho}")

    def correlation(self):
        if self.kind == "independence" or self.rho == 0.0:
            return np.eye(self.dim)
        return correlation_from_precision(
            build_conditional_precision(self.rho, self.dim)
        )


def gaussian_copula_sample(copula, marginals, rng, size=None):
    """Sample residual vectors with the given copula and delta-Laplace
    marginals.

    Parameters
    ----------
    copula : ResidualCopula
    marginals : sequence of DeltaLaplaceParams, one per component.
    rng : numpy.random.Generator
    size : int or None
        Number of vectors; ``None`` returns a single vector of shape
        ``(dim,)``, otherwise shape is ``(size, dim)``.
    """
    if len(marginals) != copula.dim:
        raise InputError(
            f"{len(marginals)} marginals supplied for dimension {copula.dim}"
        )
    n = 1 if size is None else int(size)
    w = rng.standard_normal((n, copula.dim))
    if copula.kind == "gaussian_ar1_conditional" and copula.rho != 0.0:
        lower = cholesky(copula.correlation(), lower=True)
        w = w @ lower.T
    u = ndtr(w)
    out = np.empty_like(w)
    for j, params in enumerate(marginals):
        out[:, j] = dl_quantile(np.clip(u[:, j], 1e-15, 1.0 - 1e-15), params)
    return out[0] if size is None else out
