"""Domain types and shared algebra for the sparse-and-smooth (LS-APC) prior.

The hierarchical model is

    y | beta, sigma      ~ N(X beta, sigma^-1 I_n)
    beta_i | beta_{i+1}  ~ N(-l_i beta_{i+1}, tau_i^-1),   l_p = 0
    l_i | psi_i          ~ N(l0, psi_i^-1)
    tau_i, sigma         ~ G(a, b)
    psi_i                ~ G(c, d)

with every Gamma in shape-rate form. Jointly, ``beta | tau, l`` is zero-mean
Gaussian with precision ``L diag(tau) L^T`` where ``L`` is unit lower
bidiagonal with subdiagonal ``l``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Optional

import numpy as np
from scipy.special import gammaln

from .errors import DimensionError, InvalidParameterError

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations ``y`` (n,), regressors ``X`` (n, p) and optional metadata.

    ``site_id`` and ``time_index`` label each observation with its receptor
    and sampling slot; they are only needed by the correlated-noise models.
    """

    y: np.ndarray
    X: np.ndarray
    site_id: Optional[np.ndarray] = None
    time_index: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise DimensionError(f"X must be two-dimensional, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise DimensionError(
                f"X has {X.shape[0]} rows but y has {y.shape[0]} entries"
            )
        if y.shape[0] < 1 or X.shape[1] < 1:
            raise DimensionError("need n >= 1 observations and p >= 1 regressors")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise InvalidParameterError("y and X must be finite")
        site, time = self.site_id, self.time_index
        if site is not None and time is None:
            raise DimensionError("site_id given without time_index")
        if time is not None:
            time = np.array(time).reshape(-1)
            if not np.issubdtype(time.dtype, np.integer):
                if not np.all(np.equal(np.mod(time, 1), 0)):
                    raise DimensionError("time_index must be integer valued")
                time = time.astype(np.int64)
            if time.shape[0] != y.shape[0]:
                raise DimensionError("time_index length differs from len(y)")
            time.flags.writeable = False
        if site is not None:
            site = np.array(site).reshape(-1)
            if not np.issubdtype(site.dtype, np.integer):
                if not np.all(np.equal(np.mod(site, 1), 0)):
                    raise DimensionError("site_id must be integer valued")
                site = site.astype(np.int64)
            if site.shape[0] != y.shape[0]:
                raise DimensionError("site_id length differs from len(y)")
            site.flags.writeable = False
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "site_id", site)
        object.__setattr__(self, "time_index", time)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def has_metadata(self) -> bool:
        return self.time_index is not None

    def with_observations(self, y, X) -> "Dataset":
        """Same metadata, new ``y`` and ``X`` (used by whitening)."""
        return Dataset(y, X, self.site_id, self.time_index)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        site = None if self.site_id is None else self.site_id[rows]
        time = None if self.time_index is None else self.time_index[rows]
        return Dataset(self.y[rows], self.X[rows], site, time)

    # Sufficient statistics, computed once per dataset.
    @cached_property
    def xtx(self) -> np.ndarray:
        return self.X.T @ self.X

    @cached_property
    def xty(self) -> np.ndarray:
        return self.X.T @ self.y

    @cached_property
    def yty(self) -> float:
        return float(self.y @ self.y)

    @cached_property
    def x_triangular(self) -> np.ndarray:
        """Triangular factor ``R0`` of ``X = Q0 R0`` (shape ``min(n, p) x p``)."""
        return np.linalg.qr(self.X, mode="r")


@dataclass(frozen=True)
class LsapcConfig:
    """Hyperparameters of the LS-APC prior.

    ``a, b`` are the Gamma shape and rate of both the coefficient precisions
    ``tau`` and the noise precision ``sigma``; ``c, d`` those of ``psi``.
    Setting ``fixed_l`` clamps every ``l_i`` (0 gives the plain ARD prior,
    -1 the first-difference smoothness prior) and drops ``l`` and ``psi``
    from the model.
    """

    a: float = 1e-10
    b: float = 1e-10
    c: float = 1e-10
    d: float = 1e-10
    l0: float = -1.0
    positivity: bool = False
    fixed_l: Optional[float] = None

    def __post_init__(self):
        for name in ("a", "b", "c", "d"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InvalidParameterError(f"{name} must be positive and finite, got {v}")
        if not np.isfinite(self.l0):
            raise InvalidParameterError("l0 must be finite")
        if self.fixed_l is not None and not np.isfinite(self.fixed_l):
            raise InvalidParameterError("fixed_l must be finite when set")

    @property
    def learns_l(self) -> bool:
        return self.fixed_l is None

    def to_dict(self) -> dict:
        return {
            "a": self.a, "b": self.b, "c": self.c, "d": self.d, "l0": self.l0,
            "positivity": self.positivity, "fixed_l": self.fixed_l,
        }


@dataclass(frozen=True, eq=False)
class ModelState:
    """One joint value of all unknowns ``(beta, sigma, tau, l, psi)``."""

    beta: np.ndarray
    sigma: float
    tau: np.ndarray
    l: np.ndarray
    psi: np.ndarray

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    def validate(self, p: Optional[int] = None) -> None:
        p = self.p if p is None else p
        if self.beta.shape != (p,) or self.tau.shape != (p,):
            raise DimensionError(f"beta and tau must have length {p}")
        if self.l.shape != (p - 1,) or self.psi.shape != (p - 1,):
            raise DimensionError(f"l and psi must have length {p - 1}")
        vals = (self.beta, self.tau, self.l, self.psi, np.asarray(self.sigma))
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise InvalidParameterError("state contains non-finite values")
        if not self.sigma > 0:
            raise InvalidParameterError("sigma must be positive")
        if np.any(self.tau <= 0) or np.any(self.psi <= 0):
            raise InvalidParameterError("tau and psi must be positive")

    def flat(self) -> np.ndarray:
        """Concatenate as ``beta, sigma, tau, l, psi`` (the chain CSV order)."""
        return np.concatenate(
            [self.beta, [self.sigma], self.tau, self.l, self.psi]
        )

    @classmethod
    def from_flat(cls, v, p: int) -> "ModelState":
        v = np.asarray(v, dtype=float)
        return cls(
            beta=v[:p].copy(),
            sigma=float(v[p]),
            tau=v[p + 1:2 * p + 1].copy(),
            l=v[2 * p + 1:3 * p].copy(),
            psi=v[3 * p:4 * p - 1].copy(),
        )


class EstimateSource(str, enum.Enum):
    GIBBS_MAX_SAMPLE = "GibbsMaxSample"
    VB_MEAN = "VbMean"
    FUSED_LASSO = "FusedLasso"


@dataclass(frozen=True, eq=False)
class PointEstimate:
    beta_hat: np.ndarray
    log_joint_at_max: float
    source: EstimateSource
    info: dict[str, Any] = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.beta_hat.shape[0]


def assemble_L(l) -> np.ndarray:
    """Unit lower-bidiagonal matrix with subdiagonal ``l``."""
    l = np.asarray(l, dtype=float).reshape(-1)
    p = l.shape[0] + 1
    L = np.eye(p)
    L[np.arange(1, p), np.arange(p - 1)] = l
    return L


def precision_bands(l, tau):
    """Diagonal and subdiagonal of ``L diag(tau) L^T``."""
    tau = np.asarray(tau, dtype=float)
    l = np.asarray(l, dtype=float)
    diag = tau.copy()
    diag[1:] += l * l * tau[:-1]
    off = l * tau[:-1]
    return diag, off


def assemble_precision(l, tau) -> np.ndarray:
    """Prior precision ``L diag(tau) L^T`` of ``beta`` as a dense matrix."""
    tau = np.asarray(tau, dtype=float).reshape(-1)
    l = np.asarray(l, dtype=float).reshape(-1)
    if l.shape[0] != tau.shape[0] - 1:
        raise DimensionError("l must have one entry fewer than tau")
    if np.any(~(tau > 0)):
        raise InvalidParameterError("tau must be strictly positive")
    diag, off = precision_bands(l, tau)
    P = np.diag(diag)
    i = np.arange(tau.shape[0] - 1)
    P[i + 1, i] = off
    P[i, i + 1] = off
    return P


def prior_increments(beta, l) -> np.ndarray:
    """``beta_i + l_i beta_{i+1}`` with the convention ``l_p = 0``."""
    inc = np.array(beta, dtype=float)
    inc[:-1] += l * beta[1:]
    return inc


def gamma_logpdf(x, shape, rate):
    """Gamma log-density in shape-rate form (vectorised)."""
    x = np.asarray(x, dtype=float)
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


def normal_logpdf(x, mean, precision):
    x = np.asarray(x, dtype=float)
    return 0.5 * (np.log(precision) - LOG_2PI) - 0.5 * precision * (x - mean) ** 2


def effective_l(state: ModelState, cfg: LsapcConfig) -> np.ndarray:
    if cfg.fixed_l is None:
        return state.l
    return np.full(state.p - 1, float(cfg.fixed_l))


def log_joint(state: ModelState, data: Dataset, cfg: LsapcConfig) -> float:
    """``ln p(y, beta, sigma, tau, l, psi)`` under the full hierarchical model.

    With ``cfg.fixed_l`` set, ``l`` and ``psi`` are constants and contribute
    no terms. With positivity the coefficient prior is restricted to the
    nonnegative orthant; states with a negative coefficient get ``-inf``.
    """
    p = data.p
    if state.beta.shape != (p,) or state.tau.shape != (p,):
        raise DimensionError(f"state dimension {state.beta.shape[0]} does not match p={p}")
    if cfg.fixed_l is None and (state.l.shape != (p - 1,) or state.psi.shape != (p - 1,)):
        raise DimensionError(f"l and psi must have length {p - 1}")
    beta, sigma, tau = state.beta, float(state.sigma), state.tau
    if not (np.all(np.isfinite(beta)) and np.isfinite(sigma) and np.all(np.isfinite(tau))):
        raise InvalidParameterError("state contains non-finite values")
    if cfg.positivity and np.any(beta < 0):
        return -np.inf
    l = effective_l(state, cfg)
    a, b = cfg.a, cfg.b
    n = data.n

    resid = data.y - data.X @ beta
    ll = 0.5 * n * (math.log(sigma) - LOG_2PI) - 0.5 * sigma * float(resid @ resid)

    inc = prior_increments(beta, l)
    lp_beta = 0.5 * float(np.sum(np.log(tau))) - 0.5 * p * LOG_2PI - 0.5 * float(tau @ (inc * inc))
    if cfg.positivity:
        # Orthant mass 2^-p: exact for independent coefficients (l = 0). For
        # coupled l the true mass differs by a factor that does not depend on
        # the noise model, so it cancels when comparing noise covariances.
        lp_beta += p * LOG_2

    lp = lp_beta + float(np.sum(gamma_logpdf(tau, a, b))) + float(gamma_logpdf(sigma, a, b))
    if cfg.fixed_l is None and p > 1:
        psi = state.psi
        if not (np.all(np.isfinite(l)) and np.all(np.isfinite(psi))):
            raise InvalidParameterError("state contains non-finite values")
        lp += float(np.sum(normal_logpdf(l, cfg.l0, psi)))
        lp += float(np.sum(gamma_logpdf(psi, cfg.c, cfg.d)))
    return ll + lp

