"""Gibbs sampler for the LS-APC model and Chib's marginal-likelihood estimate."""
from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.integrate import IntegrationWarning, quad
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import ConditioningError, EstimationError, InvalidParameterError
from .model import (
    LOG_2PI,
    Dataset,
    EstimateSource,
    LsapcConfig,
    ModelState,
    PointEstimate,
    effective_l,
    gamma_logpdf,
    log_joint,
    prior_increments,
)
from .sampling import (
    RngHandle,
    beta_factor,
    make_rng,
    sample_beta_qr,
    sample_beta_truncated,
    sample_gamma,
    truncated_coordinate_gibbs,
    truncnorm_logpdf,
)

logger = logging.getLogger(__name__)

RATE_FLOOR = 1e-300
BLOCKS = ("beta", "sigma", "tau", "l", "psi")


@dataclass(frozen=True)
class GibbsSettings:
    n_iter: int = 50_000
    burn_in: int = 5_000
    thin: int = 1
    seed: int = 0
    # coordinate sweeps of the truncated sampler per outer iteration
    truncated_sweeps: int = 1

    def __post_init__(self):
        if self.n_iter < 1 or self.thin < 1 or self.truncated_sweeps < 1:
            raise InvalidParameterError("n_iter, thin and truncated_sweeps must be positive")
        if not 0 <= self.burn_in < self.n_iter:
            raise InvalidParameterError("burn_in must satisfy 0 <= burn_in < n_iter")
        if self.retained < 1:
            raise InvalidParameterError("settings retain no samples")

    @property
    def retained(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        return {
            "n_iter": self.n_iter, "burn_in": self.burn_in, "thin": self.thin,
            "seed": self.seed, "truncated_sweeps": self.truncated_sweeps,
        }


@dataclass(frozen=True, eq=False)
class GibbsChain:
    """Retained draws stored column-wise, one row per kept iteration."""

    beta: np.ndarray
    sigma: np.ndarray
    tau: np.ndarray
    l: np.ndarray
    psi: np.ndarray
    log_joint_trace: np.ndarray
    rss: np.ndarray
    settings: GibbsSettings
    cfg: LsapcConfig = field(default_factory=LsapcConfig)

    def __len__(self) -> int:
        return self.log_joint_trace.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    def state(self, i: int) -> ModelState:
        return ModelState(
            beta=self.beta[i].copy(), sigma=float(self.sigma[i]), tau=self.tau[i].copy(),
            l=self.l[i].copy(), psi=self.psi[i].copy(),
        )

    @property
    def samples(self) -> tuple:
        return tuple(self.state(i) for i in range(len(self)))

    def as_matrix(self) -> np.ndarray:
        """Rows ``beta..., sigma, tau..., l..., psi..., log_joint``."""
        return np.column_stack(
            [self.beta, self.sigma, self.tau, self.l, self.psi, self.log_joint_trace]
        )


def initial_state(data: Dataset, cfg: LsapcConfig) -> ModelState:
    """Ridge coefficients, ``sigma = 1/var(y)``, unit ``tau``, ``l = l0``, ``psi = c/d``."""
    p = data.p
    beta = np.linalg.solve(data.xtx + np.eye(p), data.xty)
    if cfg.positivity:
        beta = np.maximum(beta, 0.0)
    var_y = float(np.var(data.y))
    sigma = 1.0 / var_y if var_y > 0 else 1.0
    l0 = cfg.l0 if cfg.fixed_l is None else cfg.fixed_l
    return ModelState(
        beta=beta, sigma=sigma, tau=np.ones(p),
        l=np.full(p - 1, float(l0)), psi=np.full(p - 1, cfg.c / cfg.d),
    )


def _rate(x):
    return np.maximum(x, RATE_FLOOR)


def gibbs_step(state: ModelState, data: Dataset, cfg: LsapcConfig, rng: RngHandle,
               hold: Iterable[str] = (), sweeps: int = 1) -> ModelState:
    """One systematic sweep: beta, sigma, tau, l, psi.

    Blocks named in ``hold`` keep their current value (used for the reduced
    runs of Chib's estimator). With ``cfg.fixed_l`` the ``l`` and ``psi``
    blocks are never updated.
    """
    state, _ = _step(state, data, cfg, rng, frozenset(hold), sweeps)
    return state


def _step(state, data, cfg, rng, hold, sweeps):
    p = data.p
    l = effective_l(state, cfg)
    sigma, tau, psi = state.sigma, state.tau, state.psi

    if "beta" in hold:
        beta = state.beta
    elif cfg.positivity:
        beta = sample_beta_truncated(data, sigma, l, tau, rng, sweeps, beta0=state.beta)
    else:
        beta = sample_beta_qr(data, sigma, l, tau, rng)

    resid = data.y - data.X @ beta
    rss = float(resid @ resid)
    if "sigma" not in hold:
        sigma = float(sample_gamma(cfg.a + 0.5 * data.n, _rate(cfg.b + 0.5 * rss), rng))

    if "tau" not in hold:
        inc = prior_increments(beta, l)
        tau = sample_gamma(cfg.a + 0.5, _rate(cfg.b + 0.5 * inc * inc), rng)

    if cfg.fixed_l is None and p > 1:
        if "l" not in hold:
            b_next = beta[1:]
            rho = psi + b_next * b_next * tau[:-1]
            pi = (psi * cfg.l0 - beta[:-1] * b_next * tau[:-1]) / rho
            l = pi + rng.standard_normal(p - 1) / np.sqrt(rho)
        if "psi" not in hold:
            dl = l - cfg.l0
            psi = sample_gamma(cfg.c + 0.5, _rate(cfg.d + 0.5 * dl * dl), rng)
    return ModelState(beta=beta, sigma=sigma, tau=tau, l=l, psi=psi), rss


@dataclass(frozen=True, eq=False)
class GibbsConditionals:
    """Shaping parameters of every full conditional at one state."""

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


def conditional_parameters(state: ModelState, data: Dataset, cfg: LsapcConfig) -> GibbsConditionals:
    """Evaluate all conditional shaping parameters at ``state`` (no sampling)."""
    p = data.p
    beta, sigma, tau, psi = state.beta, state.sigma, state.tau, state.psi
    l = effective_l(state, cfg)
    R, mu = beta_factor(data, sigma, l, tau)
    Rinv = solve_triangular(R, np.eye(p), lower=False)
    resid = data.y - data.X @ beta
    inc = prior_increments(beta, l)
    rho = psi + beta[1:] ** 2 * tau[:-1]
    pi = (psi * cfg.l0 - beta[:-1] * beta[1:] * tau[:-1]) / rho
    return GibbsConditionals(
        mu=mu,
        Sigma=Rinv @ Rinv.T,
        gamma_sigma=cfg.a + 0.5 * data.n,
        delta_sigma=cfg.b + 0.5 * float(resid @ resid),
        gamma_tau=np.full(p, cfg.a + 0.5),
        delta_tau=cfg.b + 0.5 * inc * inc,
        pi=pi,
        rho=rho,
        lam=np.full(p - 1, cfg.c + 0.5),
        omega=cfg.d + 0.5 * (l - cfg.l0) ** 2,
    )


def run_chain(data: Dataset, cfg: LsapcConfig, settings: GibbsSettings,
              init: Optional[ModelState] = None, hold: Iterable[str] = (),
              rng: Optional[RngHandle] = None) -> GibbsChain:
    """Run ``settings.n_iter`` sweeps and keep the thinned post-burn-in draws."""
    hold = frozenset(hold)
    unknown = hold - set(BLOCKS)
    if unknown:
        raise InvalidParameterError(f"unknown blocks {sorted(unknown)}")
    p = data.p
    state = initial_state(data, cfg) if init is None else init
    state.validate(p)
    if cfg.fixed_l is not None:
        state = ModelState(state.beta, state.sigma, state.tau,
                           np.full(p - 1, float(cfg.fixed_l)), state.psi)
    rng = make_rng(settings.seed) if rng is None else rng

    m = settings.retained
    out_beta = np.empty((m, p))
    out_sigma = np.empty(m)
    out_tau = np.empty((m, p))
    out_l = np.empty((m, p - 1))
    out_psi = np.empty((m, p - 1))
    out_lj = np.empty(m)
    out_rss = np.empty(m)

    k = 0
    for it in range(settings.n_iter):
        try:
            state, rss = _step(state, data, cfg, rng, hold, settings.truncated_sweeps)
        except ConditioningError as exc:
            raise ConditioningError(f"iteration {it}: {exc}") from exc
        kept = it - settings.burn_in
        if kept >= 0 and kept % settings.thin == 0 and k < m:
            out_beta[k] = state.beta
            out_sigma[k] = state.sigma
            out_tau[k] = state.tau
            out_l[k] = state.l
            out_psi[k] = state.psi
            out_rss[k] = rss
            out_lj[k] = log_joint(state, data, cfg)
            k += 1
    if not np.all(np.isfinite(out_lj)):
        raise EstimationError("non-finite log joint in retained draws")
    return GibbsChain(out_beta, out_sigma, out_tau, out_l, out_psi, out_lj, out_rss,
                      settings, cfg)


def map_point_estimate(chain: GibbsChain) -> PointEstimate:
    """Coefficients of the retained draw with the highest log joint density."""
    if len(chain) == 0:
        raise InvalidParameterError("empty chain")
    i = int(np.argmax(chain.log_joint_trace))
    return PointEstimate(
        beta_hat=chain.beta[i].copy(),
        log_joint_at_max=float(chain.log_joint_trace[i]),
        source=EstimateSource.GIBBS_MAX_SAMPLE,
        info={"sample_index": i},
    )


def componentwise_median(chain: GibbsChain) -> ModelState:
    return ModelState(
        beta=np.median(chain.beta, axis=0),
        sigma=float(np.median(chain.sigma)),
        tau=np.median(chain.tau, axis=0),
        l=np.median(chain.l, axis=0),
        psi=np.median(chain.psi, axis=0),
    )


class ThetaStarRule(str, enum.Enum):
    MAX_LOG_JOINT = "MaxLogJoint"
    COMPONENTWISE_MEDIAN = "ComponentwiseMedian"


def select_theta_star(chain: GibbsChain, rule) -> ModelState:
    rule = ThetaStarRule(rule)
    if rule is ThetaStarRule.MAX_LOG_JOINT:
        return chain.state(int(np.argmax(chain.log_joint_trace)))
    return componentwise_median(chain)


@dataclass(frozen=True, eq=False)
class ChibResult:
    """Terms of ``ln p(y) = ln p(y, theta*) - ln p(theta* | y)``."""

    log_marginal: float
    log_joint_star: float
    log_ordinate: float
    blocks: dict
    stderr: float
    theta_star: ModelState
    rule: ThetaStarRule

    def __float__(self) -> float:
        return self.log_marginal


def _log_mean_exp(logv, n_batches=20):
    """``ln mean(exp(logv))`` and its batch-means standard error."""
    logv = np.asarray(logv, dtype=float)
    m = logv.shape[0]
    est = float(logsumexp(logv) - math.log(m))
    if m < 2 * n_batches:
        return est, 0.0
    w = np.exp(logv - logv.max())
    size = m // n_batches
    batch = w[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    se_mean = batch.std(ddof=1) / math.sqrt(n_batches)
    return est, float(se_mean / w.mean())


def _gaussian_logpdf_factor(x, mu, R):
    z = R @ (x - mu)
    return float(np.sum(np.log(np.abs(np.diag(R)))) - 0.5 * x.shape[0] * LOG_2PI - 0.5 * z @ z)


def _log_student_kernel(u, shape, rate):
    """``ln (rate + u^2/2)^-(shape+1/2)``: a Gaussian-Gamma scale mixture, unnormalised."""
    return -(shape + 0.5) * np.log(rate + 0.5 * u * u)


def _log_h(x, bi, bnext, cfg):
    """Scalar log kernel of ``l_i`` given ``beta`` (tau_i and psi_i integrated out)."""
    u, v = bi + x * bnext, x - cfg.l0
    return (-(cfg.a + 0.5) * math.log(cfg.b + 0.5 * u * u)
            - (cfg.c + 0.5) * math.log(cfg.d + 0.5 * v * v))


def _log_cosh(s):
    s = abs(s)
    return s + math.log1p(math.exp(-2.0 * s)) - math.log(2.0)


# sinh-mapped segments are integrated out to |s| = _S_MAX; the tail beyond
# is below exp(-_S_MAX) relative to the bulk
_S_MAX = 700.0


def l_log_normaliser(bi: float, bnext: float, cfg: LsapcConfig) -> float:
    """``ln`` of the integral over ``l_i`` of the ``(tau_i, psi_i)``-marginal kernel.

    Given ``beta``, integrating out ``tau_i`` and ``psi_i`` leaves
    ``h(l) = (b + (beta_i + l beta_{i+1})^2 / 2)^-(a+1/2) (d + (l - l0)^2 / 2)^-(c+1/2)``.
    It has two sharp peaks with ``1/|l|`` shoulders, so each peak gets its
    own ``l = centre + width sinh(s)`` substitution, which flattens both.
    The real line is split at the midpoint between the peaks.
    """
    a, b, c, d, l0 = (float(v) for v in (cfg.a, cfg.b, cfg.c, cfg.d, cfg.l0))
    # plain floats overflow quietly to inf far out in the sinh-mapped tails
    bi, bnext = float(bi), float(bnext)
    wg = math.sqrt(2.0 * d)
    if bnext == 0.0:
        # the first factor is constant in l; the second integrates in closed form
        return float(_log_student_kernel(bi, a, b) + 0.5 * LOG_2PI + math.lgamma(c)
                     - math.lgamma(c + 0.5) - c * math.log(d))
    peaks = sorted([(-bi / bnext, math.sqrt(2.0 * b) / abs(bnext)), (l0, wg)])
    offset = max(_log_h(cen, bi, bnext, cfg) for cen, _ in peaks)

    def integrand(s, cen, w):
        x = cen + w * math.sinh(s)
        return math.exp(_log_h(x, bi, bnext, cfg) - offset + math.log(w) + _log_cosh(s))

    (c1, w1), (c2, w2) = peaks
    # the narrower width resolves both scales; sinh still reaches far tails
    w = min(w1, w2)
    if c2 - c1 <= 1e-12 * max(1.0, abs(c1)):
        segments = [(-_S_MAX, 0.0, c1, w), (0.0, _S_MAX, c1, w)]
    else:
        half = math.asinh(0.5 * (c2 - c1) / w)
        segments = [(-_S_MAX, 0.0, c1, w), (0.0, half, c1, w),
                    (-half, 0.0, c2, w), (0.0, _S_MAX, c2, w)]
    # quad warns when roundoff stops it short of epsrel; the error estimate
    # is checked below instead
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        parts = [quad(integrand, lo, hi, args=(cen, w), limit=400, epsabs=0, epsrel=1e-11)
                 for lo, hi, cen, w in segments]
    total = sum(v for v, _ in parts)
    err = sum(e for _, e in parts)
    if not total > 0 or not math.isfinite(total) or err > 1e-6 * total:
        raise EstimationError("l normaliser quadrature failed", block="l")
    return offset + math.log(total)


def hyper_ordinates(star: ModelState, cfg: LsapcConfig) -> dict:
    """Exact ``ln p(tau*, l*, psi* | beta*)`` split into its factors.

    Given ``beta`` the triples ``(tau_i, l_i, psi_i)`` are independent of
    each other, of ``sigma`` and of ``y``. Each factorises as
    ``p(l_i | beta) p(tau_i | l_i, beta) p(psi_i | l_i)``; the last two are
    the Gamma full conditionals and the first needs one 1-D integral.
    """
    beta, p = star.beta, star.beta.shape[0]
    l = effective_l(star, cfg)
    inc = prior_increments(beta, l)
    out = {"tau": float(np.sum(gamma_logpdf(star.tau, cfg.a + 0.5, _rate(cfg.b + 0.5 * inc * inc))))}
    if cfg.fixed_l is None and p > 1:
        log_l = 0.0
        for i in range(p - 1):
            log_l += _log_h(float(l[i]), float(beta[i]), float(beta[i + 1]), cfg) - l_log_normaliser(
                float(beta[i]), float(beta[i + 1]), cfg)
        out["l"] = log_l
        dl = l - cfg.l0
        out["psi"] = float(np.sum(gamma_logpdf(star.psi, cfg.c + 0.5, _rate(cfg.d + 0.5 * dl * dl))))
    return out


def _beta_ordinate_run(data, cfg, star, rng, n_iter, burn, first=None, sweeps=1):
    """Reduced run with ``sigma`` (and ``beta_{<first}``) held at ``theta*``.

    Returns the per-draw log conditional ordinate: of the whole ``beta*``
    when ``first`` is None, else of coordinate ``beta*_first`` given the
    other coordinates under the truncated conditional.
    """
    state = star
    vals = np.empty(n_iter)
    hold = frozenset({"beta", "sigma"})
    bstar = star.beta
    for g in range(burn + n_iter):
        l = effective_l(state, cfg)
        R, mu = beta_factor(data, star.sigma, l, state.tau)
        if first is None:
            if g >= burn:
                vals[g - burn] = _gaussian_logpdf_factor(bstar, mu, R)
            beta = mu + solve_triangular(R, rng.standard_normal(data.p), lower=False)
        else:
            prec = R.T @ R
            beta = state.beta.copy()
            if g >= burn:
                i = first
                other = prec[i] @ (beta - mu) - prec[i, i] * (beta[i] - mu[i])
                cm = mu[i] - other / prec[i, i]
                vals[g - burn] = truncnorm_logpdf(bstar[i], cm, 1.0 / math.sqrt(prec[i, i]))
            truncated_coordinate_gibbs(beta, mu, prec, rng, sweeps, first=first)
        state = ModelState(beta, star.sigma, state.tau, state.l, state.psi)
        state, _ = _step(state, data, cfg, rng, hold, sweeps)
    return vals


def chib_decomposition(data: Dataset, cfg: LsapcConfig, settings: GibbsSettings,
                       theta_star_rule=ThetaStarRule.MAX_LOG_JOINT,
                       chain: Optional[GibbsChain] = None,
                       truncated_draws: int = 1000) -> ChibResult:
    """Chib's estimate of ``ln p(y)`` with blocks sigma, beta, then (l, tau, psi).

    The posterior ordinate factorises as
    ``p(sigma*|y) p(beta*|sigma*,y) p(l*|beta*) p(tau*|l*,beta*) p(psi*|l*)``.
    The sigma factor averages its Gamma conditional over the main chain and
    the beta factor its Gaussian conditional over a reduced run with sigma
    held. The rest is exact. Putting the precisions after ``beta`` matters:
    with near-improper Gamma priors the chain visits ``tau_i`` over many
    orders of magnitude, and holding an extreme ``tau*`` fixed in a reduced
    run makes the ordinates of later blocks degenerate.

    Under positivity the beta factor is chained over coordinates, each with
    its own reduced run of ``truncated_draws`` draws.
    """
    rule = ThetaStarRule(theta_star_rule)
    if chain is None:
        chain = run_chain(data, cfg, settings)
    star = select_theta_star(chain, rule)
    if cfg.fixed_l is not None:
        star = ModelState(star.beta, star.sigma, star.tau,
                          np.full(data.p - 1, float(cfg.fixed_l)), star.psi)
    if cfg.positivity:
        star = ModelState(np.maximum(star.beta, 0.0), star.sigma, star.tau, star.l, star.psi)
    lj_star = log_joint(star, data, cfg)
    p = data.p
    blocks, ses = {}, {}

    lv = gamma_logpdf(star.sigma, cfg.a + 0.5 * data.n, _rate(cfg.b + 0.5 * chain.rss))
    blocks["sigma"], ses["sigma"] = _log_mean_exp(lv)

    seq = np.random.SeedSequence([settings.seed, 1])
    if cfg.positivity:
        total, var = 0.0, 0.0
        burn = max(truncated_draws // 10, 1)
        for i, child in enumerate(seq.spawn(p)):
            vals = _beta_ordinate_run(data, cfg, star, make_rng(child), truncated_draws, burn,
                                      first=i, sweeps=settings.truncated_sweeps)
            est, se = _log_mean_exp(vals)
            total += est
            var += se * se
        blocks["beta"], ses["beta"] = total, math.sqrt(var)
    else:
        vals = _beta_ordinate_run(data, cfg, star, make_rng(seq), settings.retained,
                                  settings.burn_in)
        blocks["beta"], ses["beta"] = _log_mean_exp(vals)

    for name, v in hyper_ordinates(star, cfg).items():
        blocks[name], ses[name] = v, 0.0

    for name, v in blocks.items():
        if not np.isfinite(v):
            raise EstimationError(f"non-finite posterior ordinate in block '{name}'", block=name)
    ordinate = float(sum(blocks.values()))
    stderr = math.sqrt(sum(s * s for s in ses.values()))
    return ChibResult(
        log_marginal=lj_star - ordinate,
        log_joint_star=lj_star,
        log_ordinate=ordinate,
        blocks=blocks,
        stderr=stderr,
        theta_star=star,
        rule=rule,
    )


def chib_log_marginal(data: Dataset, cfg: LsapcConfig, settings: GibbsSettings,
                      theta_star_rule=ThetaStarRule.MAX_LOG_JOINT,
                      chain: Optional[GibbsChain] = None) -> float:
    """Chib's log marginal likelihood; see :func:`chib_decomposition`."""
    return chib_decomposition(data, cfg, settings, theta_star_rule, chain).log_marginal
