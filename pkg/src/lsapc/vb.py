"""Mean-field variational Bayes for the LS-APC model.

The factorisation ``q(beta) q(sigma) q(tau) q(l) q(psi)`` gives factors of
the same family as the Gibbs full conditionals, with every conditioning
variable replaced by its expectation under the other factors. Each factor
update maximises the evidence lower bound given the rest, so one sweep in
the order beta, sigma, tau, l, psi cannot decrease it.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky, LinAlgError
from scipy.special import digamma, gammaln

from .errors import InvalidParameterError, NumericalError
from .gibbs import initial_state
from .model import (
    LOG_2,
    LOG_2PI,
    Dataset,
    EstimateSource,
    LsapcConfig,
    ModelState,
    PointEstimate,
    log_joint,
)
from .sampling import truncated_normal_entropy, truncated_normal_moments

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Moments:
    """Expectations consumed by the factor updates and the ELBO."""

    beta: np.ndarray          # E[beta]
    beta_outer: np.ndarray    # E[beta beta^T]
    sigma: float
    log_sigma: float
    tau: np.ndarray
    log_tau: np.ndarray
    l: np.ndarray
    l2: np.ndarray
    psi: np.ndarray
    log_psi: np.ndarray
    # Cov[beta] when known; keeps E[rss] accurate once the fit interpolates
    beta_cov: Optional[np.ndarray] = None

    @classmethod
    def point_mass(cls, state: ModelState, cfg: Optional[LsapcConfig] = None) -> "Moments":
        """Moments of a degenerate ``q`` concentrated on ``state``."""
        l = state.l
        if cfg is not None and cfg.fixed_l is not None:
            l = np.full(state.p - 1, float(cfg.fixed_l))
        return cls(
            beta=state.beta.copy(),
            beta_outer=np.outer(state.beta, state.beta),
            sigma=float(state.sigma),
            log_sigma=math.log(state.sigma),
            tau=state.tau.copy(),
            log_tau=np.log(state.tau),
            l=l.copy(),
            l2=l * l,
            psi=state.psi.copy(),
            log_psi=np.log(state.psi),
            beta_cov=np.zeros((state.p, state.p)),
        )


@dataclass(frozen=True, eq=False)
class VbPosterior:
    """Shaping parameters of every variational factor.

    For ``fixed_l`` models ``pi`` holds the clamped value, ``rho`` is
    infinite, and ``lam``/``omega`` are empty.
    """

    mu: np.ndarray
    Sigma: np.ndarray
    gamma_sigma: float
    delta_sigma: float
    gamma_tau: np.ndarray
    delta_tau: np.ndarray
    pi: np.ndarray
    rho: np.ndarray
    lam: np.ndarray
    omega: np.ndarray
    positivity: bool = False
    elbo_trace: tuple = ()
    converged: bool = False
    n_iter: int = 0

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    @property
    def elbo_value(self) -> float:
        return self.elbo_trace[-1] if self.elbo_trace else float("nan")

    def beta_mean_cov(self):
        """``E[beta]`` and ``Cov[beta]``, truncated per coordinate if needed."""
        if not self.positivity:
            return self.mu, self.Sigma
        var = np.diag(self.Sigma)
        m, s2 = truncated_normal_moments(self.mu, var)
        # keep the correlations of the untruncated factor but rescale them by
        # the truncated standard deviations, so the result stays PSD
        tvar = np.maximum(s2 - m * m, 0.0)
        scale = np.sqrt(tvar / var)
        cov = self.Sigma * np.outer(scale, scale)
        cov[np.diag_indices_from(cov)] = tvar
        return m, cov

    def beta_moments(self):
        """``E[beta]`` and ``E[beta beta^T]``."""
        m, cov = self.beta_mean_cov()
        return m, cov + np.outer(m, m)

    def moments(self) -> Moments:
        eb, cov = self.beta_mean_cov()
        learns_l = self.lam.shape[0] == self.pi.shape[0] and np.all(np.isfinite(self.rho))
        if learns_l:
            l2 = self.pi ** 2 + 1.0 / self.rho
            psi = self.lam / self.omega
            log_psi = digamma(self.lam) - np.log(self.omega)
        else:
            l2 = self.pi ** 2
            psi = np.ones_like(self.pi)
            log_psi = np.zeros_like(self.pi)
        return Moments(
            beta=eb, beta_outer=cov + np.outer(eb, eb), beta_cov=cov,
            sigma=self.gamma_sigma / self.delta_sigma,
            log_sigma=float(digamma(self.gamma_sigma) - math.log(self.delta_sigma)),
            tau=self.gamma_tau / self.delta_tau,
            log_tau=digamma(self.gamma_tau) - np.log(self.delta_tau),
            l=self.pi.copy(), l2=l2, psi=psi, log_psi=log_psi,
        )


# -- factor updates, each a function of the current moments -----------------

def expected_prior_precision(m: Moments):
    """Bands of ``E[L D L^T]`` under independent ``q(tau)`` and ``q(l)``."""
    diag = m.tau.copy()
    diag[1:] += m.l2 * m.tau[:-1]
    off = m.l * m.tau[:-1]
    return diag, off


def update_beta(m: Moments, data: Dataset):
    """Gaussian factor: returns ``(mu, Sigma, chol)`` with ``chol`` lower."""
    p = data.p
    diag, off = expected_prior_precision(m)
    prec = m.sigma * data.xtx
    prec[np.diag_indices(p)] += diag
    i = np.arange(p - 1)
    prec[i + 1, i] += off
    prec[i, i + 1] += off
    try:
        C = cholesky(prec, lower=True)
    except LinAlgError as exc:
        raise NumericalError(
            f"q(beta) precision lost positive definiteness (min diag {diag.min():.3e})"
        ) from exc
    Sigma = cho_solve((C, True), np.eye(p))
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = cho_solve((C, True), m.sigma * data.xty)
    return mu, Sigma, C


def expected_rss(m: Moments, data: Dataset) -> float:
    if m.beta_cov is None:
        return (data.yty - 2.0 * float(data.xty @ m.beta)
                + float(np.sum(data.xtx * m.beta_outer)))
    r = data.y - data.X @ m.beta
    return float(r @ r) + float(np.sum(data.xtx * m.beta_cov))


def expected_increment_sq(m: Moments) -> np.ndarray:
    """``E[(beta_i + l_i beta_{i+1})^2]`` with ``l_p = 0``."""
    S = m.beta_outer
    out = np.diag(S).copy()
    if out.shape[0] > 1:
        out[:-1] += 2.0 * m.l * np.diag(S, 1) + m.l2 * np.diag(S)[1:]
    return out


def update_sigma(m: Moments, data: Dataset, cfg: LsapcConfig):
    return cfg.a + 0.5 * data.n, cfg.b + 0.5 * expected_rss(m, data)


def update_tau(m: Moments, cfg: LsapcConfig):
    inc2 = expected_increment_sq(m)
    return np.full(inc2.shape[0], cfg.a + 0.5), cfg.b + 0.5 * inc2


def update_l(m: Moments, cfg: LsapcConfig):
    S = m.beta_outer
    rho = m.psi + np.diag(S)[1:] * m.tau[:-1]
    pi = (cfg.l0 * m.psi - np.diag(S, 1) * m.tau[:-1]) / rho
    return pi, rho


def update_psi(m: Moments, cfg: LsapcConfig):
    dl2 = m.l2 - 2.0 * cfg.l0 * m.l + cfg.l0 ** 2
    return np.full(m.l.shape[0], cfg.c + 0.5), cfg.d + 0.5 * dl2


def shaping_from_moments(m: Moments, data: Dataset, cfg: LsapcConfig) -> dict:
    """All factor parameters computed from one fixed set of moments."""
    mu, Sigma, _ = update_beta(m, data)
    g_s, d_s = update_sigma(m, data, cfg)
    g_t, d_t = update_tau(m, cfg)
    pi, rho = update_l(m, cfg)
    lam, omega = update_psi(m, cfg)
    return {
        "mu": mu, "Sigma": Sigma, "gamma_sigma": g_s, "delta_sigma": d_s,
        "gamma_tau": g_t, "delta_tau": d_t, "pi": pi, "rho": rho,
        "lam": lam, "omega": omega,
    }


def _sweep(m: Moments, data: Dataset, cfg: LsapcConfig) -> VbPosterior:
    p = data.p
    mu, Sigma, _ = update_beta(m, data)
    q = VbPosterior(
        mu=mu, Sigma=Sigma, gamma_sigma=0.0, delta_sigma=1.0,
        gamma_tau=np.ones(p), delta_tau=np.ones(p),
        pi=m.l, rho=np.full(p - 1, np.inf), lam=np.empty(0), omega=np.empty(0),
        positivity=cfg.positivity,
    )
    eb, cov = q.beta_mean_cov()
    m = replace(m, beta=eb, beta_outer=cov + np.outer(eb, eb), beta_cov=cov)

    g_s, d_s = update_sigma(m, data, cfg)
    m = replace(m, sigma=g_s / d_s, log_sigma=float(digamma(g_s) - math.log(d_s)))

    g_t, d_t = update_tau(m, cfg)
    m = replace(m, tau=g_t / d_t, log_tau=digamma(g_t) - np.log(d_t))

    if cfg.fixed_l is None and p > 1:
        pi, rho = update_l(m, cfg)
        m = replace(m, l=pi, l2=pi * pi + 1.0 / rho)
        lam, omega = update_psi(m, cfg)
    else:
        pi = m.l.copy()
        rho = np.full(p - 1, np.inf)
        lam = omega = np.empty(0)
    return replace(q, gamma_sigma=g_s, delta_sigma=d_s, gamma_tau=g_t, delta_tau=d_t,
                   pi=pi, rho=rho, lam=lam, omega=omega)


def vb_step(q: VbPosterior, data: Dataset, cfg: LsapcConfig) -> VbPosterior:
    """One full sweep of the factor updates starting from ``q``'s moments."""
    if q.p != data.p:
        raise InvalidParameterError("posterior and data dimensions differ")
    return replace(_sweep(q.moments(), data, cfg), elbo_trace=q.elbo_trace,
                   n_iter=q.n_iter + 1)


# -- evidence lower bound -----------------------------------------------------

def _gamma_entropy(shape, rate):
    return shape - np.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)


def _gamma_cross(shape, rate, e_x, e_log_x):
    """``E[ln G(x; shape, rate)]`` given ``E[x]`` and ``E[ln x]``."""
    return shape * math.log(rate) - gammaln(shape) + (shape - 1.0) * e_log_x - rate * e_x


def elbo_terms(q: VbPosterior, data: Dataset, cfg: LsapcConfig) -> dict:
    """Closed-form ELBO contributions keyed by term name."""
    m = q.moments()
    p, n = data.p, data.n
    a, b = cfg.a, cfg.b
    t = {}
    t["likelihood"] = 0.5 * n * (m.log_sigma - LOG_2PI) - 0.5 * m.sigma * expected_rss(m, data)
    inc2 = expected_increment_sq(m)
    t["beta_prior"] = (0.5 * float(np.sum(m.log_tau)) - 0.5 * p * LOG_2PI
                       - 0.5 * float(m.tau @ inc2) + (p * LOG_2 if cfg.positivity else 0.0))
    t["tau_prior"] = float(np.sum(_gamma_cross(a, b, m.tau, m.log_tau)))
    t["sigma_prior"] = float(_gamma_cross(a, b, m.sigma, m.log_sigma))
    sign, logdet = np.linalg.slogdet(q.Sigma)
    if sign <= 0:
        raise NumericalError("q(beta) covariance is not positive definite")
    h_beta = 0.5 * p * (1.0 + LOG_2PI) + 0.5 * logdet
    if cfg.positivity:
        var = np.diag(q.Sigma)
        h_beta += float(np.sum(truncated_normal_entropy(q.mu, var)
                               - 0.5 * (1.0 + LOG_2PI) - 0.5 * np.log(var)))
    t["beta_entropy"] = h_beta
    t["sigma_entropy"] = float(_gamma_entropy(q.gamma_sigma, q.delta_sigma))
    t["tau_entropy"] = float(np.sum(_gamma_entropy(q.gamma_tau, q.delta_tau)))
    if cfg.fixed_l is None and p > 1:
        dl2 = m.l2 - 2.0 * cfg.l0 * m.l + cfg.l0 ** 2
        t["l_prior"] = float(np.sum(0.5 * (m.log_psi - LOG_2PI) - 0.5 * m.psi * dl2))
        t["psi_prior"] = float(np.sum(_gamma_cross(cfg.c, cfg.d, m.psi, m.log_psi)))
        t["l_entropy"] = float(np.sum(0.5 * (1.0 + LOG_2PI - np.log(q.rho))))
        t["psi_entropy"] = float(np.sum(_gamma_entropy(q.lam, q.omega)))
    for name, v in t.items():
        if not np.isfinite(v):
            raise NumericalError(f"non-finite ELBO term '{name}'")
    return t


def elbo(q: VbPosterior, data: Dataset, cfg: LsapcConfig) -> float:
    """Evidence lower bound ``E_q[ln p(theta, y)] - E_q[ln q(theta)]``."""
    return float(sum(elbo_terms(q, data, cfg).values()))


def run_vb(data: Dataset, cfg: LsapcConfig, tol: float = 1e-8, max_iter: int = 5000,
           init: Optional[ModelState] = None) -> VbPosterior:
    """Iterate sweeps until the relative ELBO change drops below ``tol``."""
    if not tol > 0 or max_iter < 1:
        raise InvalidParameterError("tol must be positive and max_iter >= 1")
    state = initial_state(data, cfg) if init is None else init
    m = Moments.point_mass(state, cfg)
    trace = []
    converged = False
    q = None
    for it in range(max_iter):
        q = _sweep(m, data, cfg)
        value = elbo(q, data, cfg)
        trace.append(value)
        m = q.moments()
        if it > 0 and abs(value - trace[-2]) <= tol * abs(value):
            converged = True
            break
    q = replace(q, elbo_trace=tuple(trace), converged=converged, n_iter=len(trace))
    if not converged:
        warnings.warn(f"VB did not converge in {max_iter} iterations", RuntimeWarning,
                      stacklevel=2)
    return q


def vb_point_estimate(q: VbPosterior, data: Dataset, cfg: LsapcConfig) -> PointEstimate:
    """Posterior mean of ``q(beta)`` (truncated mean under positivity)."""
    m = q.moments()
    state = ModelState(beta=m.beta, sigma=m.sigma, tau=m.tau, l=m.l,
                       psi=m.psi if m.psi.shape[0] == m.l.shape[0] else np.ones_like(m.l))
    return PointEstimate(
        beta_hat=m.beta.copy(),
        log_joint_at_max=log_joint(state, data, cfg),
        source=EstimateSource.VB_MEAN,
        info={"elbo": q.elbo_value, "converged": q.converged, "n_iter": q.n_iter},
    )


def vb_model_weight(elbos, prior_model_probs=None) -> np.ndarray:
    """Posterior model weights proportional to ``p(M_j) exp(ELBO_j)``."""
    elbos = np.asarray(elbos, dtype=float).reshape(-1)
    m = elbos.shape[0]
    if prior_model_probs is None:
        prior = np.full(m, 1.0 / m)
    else:
        prior = np.asarray(prior_model_probs, dtype=float).reshape(-1)
        if prior.shape[0] != m:
            raise InvalidParameterError("one prior probability per model required")
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-8:
            raise InvalidParameterError("prior model probabilities must sum to 1")
    with np.errstate(divide="ignore"):
        logw = np.log(prior) + elbos
    logw -= np.max(logw)
    w = np.exp(logw)
    return w / w.sum()
