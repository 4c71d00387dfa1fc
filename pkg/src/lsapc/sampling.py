"""Seeded sampling primitives used by the Gibbs sampler and the VB solver.

The conditional posterior of the coefficients has precision
``sigma X^T X + L D L^T``. Both terms are Gram matrices, so the precision is
``K^T K`` for the stacked matrix ``K = [sqrt(sigma) R0; sqrt(D) L^T]``, where
``R0`` is the triangular QR factor of ``X`` (computed once per dataset).
A second QR of ``K`` yields ``R`` with ``R^T R`` equal to the precision and
draws need only triangular solves; the covariance is never formed.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erfcx, log_ndtr, ndtri_exp

from .errors import ConditioningError, InvalidParameterError
from .model import Dataset

RngHandle = np.random.Generator

# Near-improper Gamma priors legitimately spread tau over ~25 decades, so
# diag(R) can span ~1e12; only flag factors at the edge of double precision.
SINGULAR_RTOL = 1e-15
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def make_rng(seed) -> RngHandle:
    """Return a PCG64 generator; ``seed`` may be an int or a ``SeedSequence``."""
    return np.random.Generator(np.random.PCG64(seed))


def sample_gamma(shape, rate, rng: RngHandle, size=None):
    """Draw from Gamma(shape, rate), i.e. mean ``shape / rate``."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(~(shape > 0)) or np.any(~(rate > 0)):
        raise InvalidParameterError("Gamma shape and rate must be positive")
    out = rng.gamma(shape, 1.0 / rate, size=size)
    # gamma() can underflow to exactly 0 for tiny shapes; keep the support open.
    return np.maximum(out, np.finfo(float).tiny)


def beta_factor(data: Dataset, sigma: float, l, tau):
    """Triangular factor ``R`` and mean ``mu`` of the coefficient conditional.

    Returns ``(R, mu)`` with ``R^T R = sigma X^T X + L diag(tau) L^T`` and
    ``mu = (R^T R)^{-1} sigma X^T y``.

    Raises
    ------
    ConditioningError
        If a diagonal entry of ``R`` is negligible relative to the largest.
    """
    p = data.p
    sqrt_tau = np.sqrt(np.asarray(tau, dtype=float))
    prior_rows = np.diag(sqrt_tau)
    if p > 1:
        prior_rows[np.arange(p - 1), np.arange(1, p)] = sqrt_tau[:-1] * np.asarray(l)
    K = np.vstack([math.sqrt(sigma) * data.x_triangular, prior_rows])
    R = np.linalg.qr(K, mode="r")
    dR = np.abs(np.diag(R))
    if not np.all(np.isfinite(R)) or dR.min() < SINGULAR_RTOL * dR.max():
        i = int(np.argmin(dR))
        raise ConditioningError(
            f"coefficient precision is numerically singular (|R[{i},{i}]| = {dR[i]:.3e})"
        )
    rhs = sigma * data.xty
    z = solve_triangular(R, rhs, trans="T", lower=False, check_finite=False)
    mu = solve_triangular(R, z, lower=False, check_finite=False)
    return R, mu


def sample_beta_qr(data: Dataset, sigma: float, l, tau, rng: RngHandle) -> np.ndarray:
    """Draw the coefficients from their Gaussian full conditional."""
    R, mu = beta_factor(data, sigma, l, tau)
    z = rng.standard_normal(data.p)
    return mu + solve_triangular(R, z, lower=False, check_finite=False)


def truncnorm_rvs(mean, sd, rng: RngHandle):
    """Inverse-CDF draws from ``N(mean, sd^2)`` truncated to ``[0, inf)``.

    Works in log space so that far-tail truncation (mean many sd below zero)
    stays accurate.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    u = rng.random(np.broadcast(mean, sd).shape)
    z = -ndtri_exp(np.log(u) + log_ndtr(mean / sd))
    return np.maximum(mean + sd * z, 0.0)


def truncnorm_logpdf(x, mean, sd):
    """Log-density of ``N(mean, sd^2)`` truncated to ``[0, inf)``."""
    x = np.asarray(x, dtype=float)
    zz = (x - mean) / sd
    out = -0.5 * zz * zz - _LOG_SQRT_2PI - np.log(sd) - log_ndtr(mean / sd)
    return np.where(x >= 0, out, -np.inf)


def truncated_coordinate_gibbs(beta, mu, precision, rng: RngHandle, sweeps=1, first=0):
    """Coordinate-wise Gibbs sweeps for ``N(mu, precision^-1)`` on ``[0, inf)^p``.

    Only coordinates ``first, ..., p-1`` are updated; earlier ones stay fixed.
    ``beta`` is modified in place and returned.
    """
    p = beta.shape[0]
    diag = np.diag(precision).copy()
    sd = 1.0 / np.sqrt(diag)
    r = precision @ (beta - mu)
    for _ in range(sweeps):
        for i in range(first, p):
            cond_mean = beta[i] - r[i] / diag[i]
            new = float(truncnorm_rvs(cond_mean, sd[i], rng))
            delta = new - beta[i]
            if delta != 0.0:
                r += precision[:, i] * delta
                beta[i] = new
    return beta


def sample_beta_truncated(data: Dataset, sigma: float, l, tau, rng: RngHandle,
                          sweeps: int = 1, beta0=None) -> np.ndarray:
    """Draw nonnegative coefficients from the truncated full conditional.

    Runs ``sweeps`` coordinate-wise Gibbs passes, starting from ``beta0``
    (the current chain value) or, if absent, from the clipped mean.
    """
    if sweeps < 1:
        raise InvalidParameterError("sweeps must be >= 1")
    R, mu = beta_factor(data, sigma, l, tau)
    precision = R.T @ R
    if beta0 is None:
        beta = np.maximum(mu, 0.0)
    else:
        beta = np.maximum(np.array(beta0, dtype=float), 0.0)
    return truncated_coordinate_gibbs(beta, mu, precision, rng, sweeps)


def truncated_normal_moments(m, v):
    """First and second moments of ``N(m, v)`` truncated to ``[0, inf)``.

    Uses the scaled complementary error function for the inverse Mills ratio,
    which stays accurate far into the lower tail. Vectorised over ``m, v``.
    """
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(~(v > 0)):
        raise InvalidParameterError("variance must be positive")
    s = np.sqrt(v)
    alpha = -m / s
    # phi(alpha) / (1 - Phi(alpha))
    lam = _SQRT_2_OVER_PI / erfcx(alpha / math.sqrt(2.0))
    mean = m + s * lam
    var = v * np.maximum(1.0 + alpha * lam - lam * lam, 0.0)
    mean = np.maximum(mean, 0.0)
    second = var + mean * mean
    if mean.ndim == 0:
        return float(mean), float(second)
    return mean, second


def truncated_normal_entropy(m, v):
    """Differential entropy of ``N(m, v)`` truncated to ``[0, inf)``."""
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    s = np.sqrt(v)
    alpha = -m / s
    lam = _SQRT_2_OVER_PI / erfcx(alpha / math.sqrt(2.0))
    log_z = log_ndtr(m / s)
    return 0.5 * (1.0 + math.log(2.0 * math.pi)) + np.log(s) + log_z + 0.5 * alpha * lam
