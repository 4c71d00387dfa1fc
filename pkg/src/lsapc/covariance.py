"""Time-correlated observation noise models and marginal-likelihood selection.

Noise is modelled as ``e ~ N(0, sigma^-1 B(xi))`` where ``B`` has unit
diagonal and ``xi`` between two observations of the same site taken in
adjacent sampling slots. Pre-multiplying by the inverse Cholesky factor of
``B`` restores the independent-noise likelihood, so every candidate ``xi``
is scored by fitting the standard model to whitened data and adding the
log-Jacobian ``-sum(log diag chol(B))`` of the transform.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from .errors import DimensionError, LsapcError, NotPositiveDefiniteError
from .gibbs import GibbsSettings, ThetaStarRule, chib_decomposition, run_chain
from .model import Dataset, LsapcConfig
from .vb import run_vb

logger = logging.getLogger(__name__)

DEFAULT_XI_GRID = (-0.2, -0.1, 0.0, 0.1, 0.2, 0.3, 0.35, 0.4, 0.45, 0.5)
METHODS = ("gs_map", "gs_median", "vb")


@dataclass(frozen=True, eq=False)
class CovarianceModel:
    xi: float
    B: np.ndarray
    chol_B: np.ndarray

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def log_jacobian(self) -> float:
        """``ln |det chol(B)^-1|``, the density change under whitening."""
        return -float(np.sum(np.log(np.diag(self.chol_B))))


def adjacency(site_id, time_index) -> np.ndarray:
    """Boolean matrix marking same-site pairs one sampling slot apart."""
    site_id = np.asarray(site_id).reshape(-1)
    time_index = np.asarray(time_index).reshape(-1)
    if site_id.shape != time_index.shape:
        raise DimensionError("site_id and time_index must have the same length")
    same_site = site_id[:, None] == site_id[None, :]
    adjacent = np.abs(time_index[:, None] - time_index[None, :]) == 1
    return same_site & adjacent


def build_B(xi: float, site_id, time_index) -> CovarianceModel:
    """Unit-diagonal correlation matrix with ``xi`` between adjacent slots.

    Raises
    ------
    NotPositiveDefiniteError
        When ``B(xi)`` has no Cholesky factor for this metadata.
    """
    A = adjacency(site_id, time_index)
    B = np.eye(A.shape[0]) + float(xi) * A
    try:
        C = cholesky(B, lower=True)
    except LinAlgError as exc:
        raise NotPositiveDefiniteError(f"B(xi={xi}) is not positive definite", xi=xi) from exc
    if not np.all(np.diag(C) > 0):
        raise NotPositiveDefiniteError(f"B(xi={xi}) is not positive definite", xi=xi)
    return CovarianceModel(xi=float(xi), B=B, chol_B=C)


def longest_run(site_id, time_index) -> int:
    """Longest chain of consecutive slots observed at a single site."""
    best = 0
    site_id = np.asarray(site_id)
    time_index = np.asarray(time_index)
    for s in np.unique(site_id):
        t = np.unique(time_index[site_id == s])
        run = 1
        best = max(best, 1)
        for a, b in zip(t[:-1], t[1:]):
            run = run + 1 if b - a == 1 else 1
            best = max(best, run)
    return best


def feasible_xi_bound(site_id, time_index) -> float:
    """``|xi|`` below this keeps ``B`` positive definite (unique site/slot pairs)."""
    k = longest_run(site_id, time_index)
    if k <= 1:
        return math.inf
    return 1.0 / (2.0 * math.cos(math.pi / (k + 1)))


def whiten(data: Dataset, model: CovarianceModel) -> Dataset:
    """Apply ``chol(B)^-1`` to ``y`` and ``X`` by triangular solves."""
    if model.n != data.n:
        raise DimensionError(f"covariance model has size {model.n}, data has n={data.n}")
    if model.xi == 0.0:
        return data
    C = model.chol_B
    y = solve_triangular(C, data.y, lower=True)
    X = solve_triangular(C, data.X, lower=True)
    return data.with_observations(y, X)


@dataclass(frozen=True, eq=False)
class SelectionTable:
    xis: np.ndarray
    log_marginals: np.ndarray     # (m, 3): gs_map, gs_median, vb
    methods: tuple = METHODS
    stderr: Optional[np.ndarray] = None
    dropped: tuple = ()

    @property
    def relative(self) -> np.ndarray:
        out = np.full_like(self.log_marginals, np.nan)
        for k in range(self.log_marginals.shape[1]):
            col = self.log_marginals[:, k]
            if np.any(np.isfinite(col)):
                out[:, k] = col - np.nanmax(col)
        return out

    @property
    def argmax_per_method(self) -> np.ndarray:
        out = []
        for k in range(self.log_marginals.shape[1]):
            col = self.log_marginals[:, k]
            out.append(int(np.nanargmax(col)) if np.any(np.isfinite(col)) else -1)
        return np.array(out)

    @property
    def selected_xi(self) -> dict:
        return {name: (float(self.xis[i]) if i >= 0 else None)
                for name, i in zip(self.methods, self.argmax_per_method)}

    def rows(self):
        rel = self.relative
        for i, xi in enumerate(self.xis):
            yield [xi, *self.log_marginals[i], *rel[i]]

    @property
    def header(self):
        return ["xi", *self.methods, *(f"{m}_rel" for m in self.methods)]


def _evaluate_cell(args):
    data, xi, cfg, gibbs, vb_tol, vb_max_iter, cell_seed = args
    out = {"xi": xi, "values": [np.nan] * 3, "stderr": [np.nan] * 3, "error": None}
    try:
        model = build_B(xi, data.site_id, data.time_index)
    except NotPositiveDefiniteError as exc:
        out["error"] = f"infeasible: {exc}"
        out["infeasible"] = True
        return out
    wd = whiten(data, model)
    jac = model.log_jacobian
    settings = replace(gibbs, seed=cell_seed)
    try:
        chain = run_chain(wd, cfg, settings)
        for k, rule in enumerate((ThetaStarRule.MAX_LOG_JOINT, ThetaStarRule.COMPONENTWISE_MEDIAN)):
            res = chib_decomposition(wd, cfg, settings, rule, chain=chain)
            out["values"][k] = res.log_marginal + jac
            out["stderr"][k] = res.stderr
    except LsapcError as exc:
        out["error"] = f"gibbs: {exc}"
    try:
        q = run_vb(wd, cfg, vb_tol, vb_max_iter)
        out["values"][2] = q.elbo_value + jac
        out["stderr"][2] = 0.0
    except LsapcError as exc:
        out["error"] = f"vb: {exc}"
    return out


def cell_seed(seed: int, xi: float) -> int:
    """Per-cell seed derived from the base seed and the grid value."""
    key = int(round(float(xi) * 1_000_000)) & 0xFFFFFFFF
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]).generate_state(1)[0])


def grid_select(data: Dataset, xi_grid: Sequence[float] = DEFAULT_XI_GRID,
                cfg: LsapcConfig = LsapcConfig(), gibbs: GibbsSettings = GibbsSettings(),
                vb_tol: float = 1e-8, vb_max_iter: int = 5000,
                n_jobs: int = 1) -> SelectionTable:
    """Score every ``xi`` by Chib (both theta* rules) and by the ELBO.

    Grid values giving a non-positive-definite ``B`` are dropped with a log
    notice; other per-cell failures leave NaN in the table.
    """
    if not data.has_metadata:
        raise DimensionError("grid selection needs site_id and time_index metadata")
    site = data.site_id if data.site_id is not None else np.zeros(data.n, dtype=int)
    data = Dataset(data.y, data.X, site, data.time_index)
    jobs = [(data, float(xi), cfg, gibbs, vb_tol, vb_max_iter, cell_seed(gibbs.seed, xi))
            for xi in xi_grid]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            cells = list(pool.map(_evaluate_cell, jobs))
    else:
        cells = [_evaluate_cell(j) for j in jobs]

    xis, vals, ses, dropped = [], [], [], []
    for c in cells:
        if c.get("infeasible"):
            logger.warning("dropping xi=%g: %s", c["xi"], c["error"])
            dropped.append(c["xi"])
            continue
        if c["error"]:
            logger.warning("xi=%g: %s", c["xi"], c["error"])
        xis.append(c["xi"])
        vals.append(c["values"])
        ses.append(c["stderr"])
    if not xis:
        raise NotPositiveDefiniteError("no grid value gives a positive definite B")
    return SelectionTable(
        xis=np.array(xis, dtype=float),
        log_marginals=np.array(vals, dtype=float).reshape(-1, 3),
        stderr=np.array(ses, dtype=float).reshape(-1, 3),
        dropped=tuple(dropped),
    )


def default_n_jobs() -> int:
    try:
        return max(1, int(os.environ.get("LSAPC_NUM_THREADS", "1")))
    except ValueError:
        return 1
