"""Synthetic sparse-and-smooth regression problems and the Monte Carlo study."""
from __future__ import annotations

import enum
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .covariance import build_B
from .errors import DimensionError, InvalidParameterError, LsapcError
from .fused_lasso import FlConfig, cross_validate, fit_fused_lasso
from .gibbs import GibbsSettings, map_point_estimate, run_chain
from .model import Dataset, LsapcConfig
from .vb import run_vb, vb_point_estimate

logger = logging.getLogger(__name__)


class Shape(str, enum.Enum):
    EXP_BELL = "ExpBell"
    PIECEWISE_CONSTANT = "PiecewiseConstant"


class Method(str, enum.Enum):
    FL = "FL"
    LSAPC_GS = "LSAPC_GS"
    LSAPC_VB = "LSAPC_VB"
    LSAPC_GS_L0 = "LSAPC_GS_l0"
    LSAPC_VB_L0 = "LSAPC_VB_l0"


DEFAULT_SUPPORT = {Shape.EXP_BELL: 14, Shape.PIECEWISE_CONSTANT: 10}


@dataclass(frozen=True)
class GroundTruthSpec:
    shape: Shape = Shape.EXP_BELL
    p: int = 100
    # None picks the shape's default support
    support: Optional[int] = None
    amplitude: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape(self.shape))
        if self.support is None:
            object.__setattr__(self, "support", DEFAULT_SUPPORT[self.shape])
        if self.p < 1 or self.support < 1:
            raise InvalidParameterError("p and support must be positive")
        if self.support > self.p:
            raise InvalidParameterError(f"support {self.support} exceeds p={self.p}")
        if not self.amplitude > 0:
            raise InvalidParameterError("amplitude must be positive")


# Block anchors as fractions of p for the three-block profile.
_ANCHORS = (0.1, 0.4, 0.7)


def _place_blocks(p, sizes):
    starts, prev_end = [], 0
    remaining = sum(sizes)
    for anchor, size in zip(_ANCHORS, sizes):
        start = max(int(anchor * p), prev_end)
        start = min(start, p - remaining)
        starts.append(start)
        prev_end = start + size
        remaining -= size
    return starts


def make_ground_truth(spec: GroundTruthSpec) -> np.ndarray:
    """Exactly ``spec.support`` nonzero coefficients, all others zero.

    ``ExpBell`` splits the support into an exponential rise, an exponential
    decay and a Gaussian bell; ``PiecewiseConstant`` is a single flat block.
    """
    p, s, amp = spec.p, spec.support, spec.amplitude
    beta = np.zeros(p)
    if spec.shape is Shape.PIECEWISE_CONSTANT:
        start = min(int(0.4 * p), p - s)
        beta[start:start + s] = amp
        return beta
    sizes = [s // 3 + (1 if k < s % 3 else 0) for k in range(3)]
    starts = _place_blocks(p, sizes)
    for kind, start, size in zip(("rise", "decay", "bell"), starts, sizes):
        if size == 0:
            continue
        u = np.arange(size) / max(size - 1, 1)
        if kind == "rise":
            block = amp * np.exp(3.0 * (u - 1.0))
        elif kind == "decay":
            block = amp * np.exp(-3.0 * u)
        else:
            block = amp * np.exp(-0.5 * ((u - 0.5) / 0.25) ** 2)
        beta[start:start + size] = block
    return beta


def simulate_dataset(beta_true, n: int, x_sd: float = 2.0, noise_sd: float = 200.0,
                     seed=0) -> Dataset:
    """``X_ij ~ N(0, x_sd^2)``, ``y = X beta_true + N(0, noise_sd^2 I)``."""
    if n < 1:
        raise InvalidParameterError("n must be >= 1")
    beta_true = np.asarray(beta_true, dtype=float)
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, x_sd, size=(n, beta_true.shape[0]))
    y = X @ beta_true + rng.normal(0.0, noise_sd, size=n)
    return Dataset(y, X)


def simulate_correlated_dataset(beta_true, n_sites: int, n_slots: int, xi: float,
                                x_sd: float = 2.0, noise_sd: float = 1.0, seed=0) -> Dataset:
    """Noise ``N(0, noise_sd^2 B(xi))`` over an ``n_sites x n_slots`` sampling layout.

    Observations are ordered site-major, so ``site_id`` repeats and
    ``time_index`` counts ``0..n_slots-1`` within each site.
    """
    if n_sites < 1 or n_slots < 1:
        raise InvalidParameterError("n_sites and n_slots must be >= 1")
    beta_true = np.asarray(beta_true, dtype=float)
    site = np.repeat(np.arange(n_sites), n_slots)
    slot = np.tile(np.arange(n_slots), n_sites)
    model = build_B(xi, site, slot)
    rng = np.random.default_rng(seed)
    n = n_sites * n_slots
    X = rng.normal(0.0, x_sd, size=(n, beta_true.shape[0]))
    e = noise_sd * (model.chol_B @ rng.standard_normal(n))
    return Dataset(X @ beta_true + e, X, site, slot)


def absolute_error(beta_hat, beta_true) -> float:
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta_true = np.asarray(beta_true, dtype=float)
    if beta_hat.shape != beta_true.shape:
        raise DimensionError("estimate and truth differ in length")
    return float(np.sum(np.abs(beta_hat - beta_true)))


@dataclass(frozen=True)
class StudyConfig:
    spec: GroundTruthSpec = field(default_factory=GroundTruthSpec)
    n_values: tuple = (40, 80, 160)
    noise_sd: float = 200.0
    x_sd: float = 2.0
    n_reps: int = 10
    seed: int = 0
    methods: tuple = tuple(Method)
    lsapc: LsapcConfig = field(default_factory=LsapcConfig)
    gibbs: GibbsSettings = field(default_factory=lambda: GibbsSettings(5000, 500))
    vb_tol: float = 1e-8
    vb_max_iter: int = 5000
    cv_folds: int = 5

    def __post_init__(self):
        if self.n_reps < 1:
            raise InvalidParameterError("n_reps must be >= 1")
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))


@dataclass(frozen=True, eq=False)
class StudyResult:
    rows: list                     # dicts: rep, n, method, ae, status
    wall_times: list               # seconds, aligned with rows
    beta_true: np.ndarray

    header = ("rep", "n", "method", "ae", "status")

    def ae(self, method, n=None) -> np.ndarray:
        method = Method(method).value
        return np.array([r["ae"] for r in self.rows
                         if r["method"] == method and (n is None or r["n"] == n)])

    def summary(self) -> dict:
        """AE quantiles per ``n`` and method."""
        out = {}
        for r in self.rows:
            out.setdefault(str(r["n"]), {}).setdefault(r["method"], []).append(r["ae"])
        for n, by_method in out.items():
            for m, v in by_method.items():
                v = np.array(v, dtype=float)
                v = v[np.isfinite(v)]
                by_method[m] = {
                    "count": int(v.size),
                    "median": float(np.median(v)) if v.size else None,
                    "q25": float(np.quantile(v, 0.25)) if v.size else None,
                    "q75": float(np.quantile(v, 0.75)) if v.size else None,
                    "mean": float(np.mean(v)) if v.size else None,
                }
        return out


def _fit(method: Method, data: Dataset, config: StudyConfig, seed: int) -> np.ndarray:
    if method is Method.FL:
        base = FlConfig(folds=config.cv_folds, positive=config.lsapc.positivity)
        best = cross_validate(data, folds=config.cv_folds, seed=seed, base=base)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return fit_fused_lasso(data, best).beta_hat
    cfg = config.lsapc
    if method in (Method.LSAPC_GS_L0, Method.LSAPC_VB_L0):
        cfg = replace(cfg, fixed_l=0.0)
    if method in (Method.LSAPC_GS, Method.LSAPC_GS_L0):
        chain = run_chain(data, cfg, replace(config.gibbs, seed=seed))
        return map_point_estimate(chain).beta_hat
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        q = run_vb(data, cfg, config.vb_tol, config.vb_max_iter)
    return vb_point_estimate(q, data, cfg).beta_hat


def _cell(args):
    config, beta_true, rep, n, data_seed, fit_seed = args
    data = simulate_dataset(beta_true, n, config.x_sd, config.noise_sd, data_seed)
    out = []
    for method in config.methods:
        t0 = time.perf_counter()
        try:
            beta_hat = _fit(method, data, config, fit_seed)
            ae, status = absolute_error(beta_hat, beta_true), "ok"
        except LsapcError as exc:
            logger.warning("rep %d n %d %s failed: %s", rep, n, method.value, exc)
            ae, status = float("nan"), f"failed: {type(exc).__name__}"
        row = {"rep": rep, "n": n, "method": method.value, "ae": ae, "status": status}
        out.append((row, time.perf_counter() - t0))
    return out


def run_study(config: StudyConfig, n_jobs: int = 1) -> StudyResult:
    """Every rep x n x method cell; failures are recorded, not raised.

    Each (rep, n) pair draws its data and fit seeds from its own spawned
    stream, so the table does not depend on ``n_jobs``.
    """
    beta_true = make_ground_truth(config.spec)
    root = np.random.SeedSequence(config.seed)
    jobs = []
    for rep, rep_seq in enumerate(root.spawn(config.n_reps)):
        for n, n_seq in zip(config.n_values, rep_seq.spawn(len(config.n_values))):
            data_seed, fit_seed = (int(v) for v in n_seq.generate_state(2))
            jobs.append((config, beta_true, rep, n, data_seed, fit_seed))
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            cells = list(pool.map(_cell, jobs))
    else:
        cells = [_cell(j) for j in jobs]
    rows = [r for cell in cells for r, _ in cell]
    times = [t for cell in cells for _, t in cell]
    return StudyResult(rows=rows, wall_times=times, beta_true=beta_true)
