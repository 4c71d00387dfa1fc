"""Dataset and result file formats.

A dataset is a directory holding ``y.csv`` (header ``y``), ``X.csv``
(header ``x1..xp``) and optionally ``meta.csv`` (header
``site_id,time_index``). Results go through :class:`ResultWriter`, which
records every file it writes in ``manifest.json``. Numbers are written with
17 significant digits, UTF-8, LF line endings.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .covariance import SelectionTable
from .errors import DataError, InvalidParameterError
from .gibbs import GibbsChain
from .model import Dataset, PointEstimate
from .simulation import StudyResult
from .vb import VbPosterior

MANIFEST = "manifest.json"


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    return str(v)


def _write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _read_csv(path: Path):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise DataError(f"missing file {path}") from exc
    if not rows:
        raise DataError(f"{path} is empty")
    return rows[0], rows[1:]


def _numeric(path, rows, width, dtype=float):
    out = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {i + 2} has {len(row)} cells, expected {width}")
        try:
            out[i] = [float(c) for c in row]
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric cell in row {i + 2}") from exc
    if not np.all(np.isfinite(out)):
        raise DataError(f"{path}: non-finite values")
    if dtype is int:
        if not np.all(out == np.round(out)):
            raise DataError(f"{path}: metadata must be integers")
        return out.astype(np.int64)
    return out


def save_dataset(data: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_csv(path / "y.csv", ["y"], ([v] for v in data.y))
    _write_csv(path / "X.csv", [f"x{j + 1}" for j in range(data.p)], data.X.tolist())
    if data.has_metadata:
        site = data.site_id if data.site_id is not None else np.zeros(data.n, dtype=np.int64)
        _write_csv(path / "meta.csv", ["site_id", "time_index"],
                   zip(site.tolist(), data.time_index.tolist()))
    return path


def load_dataset(path) -> Dataset:
    """Read and validate a dataset directory.

    Raises
    ------
    DataError
        Missing files, wrong headers, non-numeric cells, inconsistent
        lengths, or incomplete metadata.
    """
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"dataset directory {path} does not exist")
    header, rows = _read_csv(path / "y.csv")
    if header != ["y"]:
        raise DataError(f"y.csv header must be 'y', got {header}")
    y = _numeric(path / "y.csv", rows, 1)[:, 0]
    header, rows = _read_csv(path / "X.csv")
    p = len(header)
    if p == 0 or header != [f"x{j + 1}" for j in range(p)]:
        raise DataError("X.csv header must be x1..xp")
    X = _numeric(path / "X.csv", rows, p)
    if X.shape[0] != y.shape[0]:
        raise DataError(f"X.csv has {X.shape[0]} rows but y.csv has {y.shape[0]}")
    site = time = None
    meta = path / "meta.csv"
    if meta.exists():
        header, rows = _read_csv(meta)
        if header != ["site_id", "time_index"]:
            raise DataError(f"meta.csv header must be 'site_id,time_index', got {header}")
        M = _numeric(meta, rows, 2, dtype=int)
        if M.shape[0] != y.shape[0]:
            raise DataError("meta.csv length differs from y.csv")
        site, time = M[:, 0], M[:, 1]
    return Dataset(y, X, site, time)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _versions() -> dict:
    from . import __version__
    import scipy
    return {"lsapc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


class ResultWriter:
    """The single writer for one output directory."""

    def __init__(self, output_dir, config: Optional[dict] = None, seed=None):
        self.root = Path(output_dir)
        self.config = config or {}
        self.seed = seed
        self.files: list[str] = []

    def _path(self, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return self.root / name

    def csv(self, name: str, header, rows):
        _write_csv(self._path(name), header, rows)

    def json(self, name: str, obj):
        with open(self._path(name), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")

    def dataset(self, name: str, data: Dataset):
        save_dataset(data, self.root / name)
        for f in ("y.csv", "X.csv", "meta.csv"):
            if (self.root / name / f).exists():
                self.files.append(f"{name}/{f}")

    def finalize(self) -> Path:
        manifest = {
            "files": sorted(self.files),
            "config": self.config,
            "config_hash": config_hash(self.config),
            "seed": self.seed,
            "versions": _versions(),
        }
        path = self.root / MANIFEST
        self.root.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return [_json_default(v) if isinstance(v, np.ndarray) else _jsonable(v) for v in o]
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _jsonable(v):
    v = v.item() if hasattr(v, "item") else v
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _l_column(l_est, p):
    out = np.zeros(p)
    out[: p - 1] = l_est
    return out


def chain_summary_rows(chain: GibbsChain):
    i_max = int(np.argmax(chain.log_joint_trace))
    mean = chain.beta.mean(axis=0)
    lo, hi = np.quantile(chain.beta, [0.025, 0.975], axis=0)
    l_est = _l_column(chain.l.mean(axis=0), chain.p)
    for j in range(chain.p):
        yield [j + 1, chain.beta[i_max, j], mean[j], lo[j], hi[j], l_est[j]]


def chain_header(p: int):
    return ([f"beta{j + 1}" for j in range(p)] + ["sigma"] + [f"tau{j + 1}" for j in range(p)]
            + [f"l{j + 1}" for j in range(p - 1)] + [f"psi{j + 1}" for j in range(p - 1)]
            + ["log_joint"])


def vb_summary_rows(q: VbPosterior):
    m, _ = q.beta_moments()
    sd = np.sqrt(np.diag(q.Sigma))
    if q.positivity:
        a = -q.mu / sd
        lo = stats.truncnorm.ppf(0.025, a, np.inf, loc=q.mu, scale=sd)
        hi = stats.truncnorm.ppf(0.975, a, np.inf, loc=q.mu, scale=sd)
    else:
        lo, hi = stats.norm.ppf([[0.025], [0.975]], loc=q.mu, scale=sd)
    l_est = _l_column(q.pi, q.p)
    for j in range(q.p):
        yield [j + 1, m[j], m[j], lo[j], hi[j], l_est[j]]


SUMMARY_HEADER = ["index", "map", "mean", "q2.5", "q97.5", "l"]


def posterior_to_dict(q: VbPosterior) -> dict:
    return {
        "mu": q.mu.tolist(), "Sigma": q.Sigma.tolist(),
        "gamma_sigma": q.gamma_sigma, "delta_sigma": q.delta_sigma,
        "gamma_tau": q.gamma_tau.tolist(), "delta_tau": q.delta_tau.tolist(),
        "pi": q.pi.tolist(), "rho": [_jsonable(v) for v in q.rho],
        "lambda": q.lam.tolist(), "omega": q.omega.tolist(),
        "positivity": q.positivity, "elbo_trace": list(q.elbo_trace),
        "converged": q.converged, "n_iter": q.n_iter,
    }


def write_artifact(writer: ResultWriter, artifact, prefix: str = ""):
    """Write one artifact's files through ``writer``."""
    if isinstance(artifact, GibbsChain):
        if len(artifact) == 0:
            raise InvalidParameterError("refusing to write an empty chain")
        writer.csv(prefix + "chain.csv", chain_header(artifact.p), artifact.as_matrix().tolist())
        writer.csv(prefix + "summary.csv", SUMMARY_HEADER, chain_summary_rows(artifact))
    elif isinstance(artifact, VbPosterior):
        writer.json(prefix + "posterior.json", posterior_to_dict(artifact))
        writer.csv(prefix + "summary.csv", SUMMARY_HEADER, vb_summary_rows(artifact))
    elif isinstance(artifact, SelectionTable):
        writer.csv(prefix + "selection.csv", artifact.header, artifact.rows())
    elif isinstance(artifact, PointEstimate):
        writer.csv(prefix + "estimate.csv", ["index", "beta_hat"],
                   ([j + 1, v] for j, v in enumerate(artifact.beta_hat)))
    elif isinstance(artifact, StudyResult):
        if not artifact.rows:
            raise InvalidParameterError("refusing to write an empty study table")
        writer.csv(prefix + "results.csv", StudyResult.header,
                   ([r[k] for k in StudyResult.header] for r in artifact.rows))
        writer.json(prefix + "summary.json", artifact.summary())
        writer.json(prefix + "timings.json", {"wall_time_s": list(artifact.wall_times)})
    else:
        raise TypeError(f"cannot write {type(artifact).__name__}")


def write_results(artifact, output_dir, config: Optional[dict] = None, seed=None) -> Path:
    """Write ``artifact`` plus a manifest; returns the manifest path."""
    writer = ResultWriter(output_dir, config, seed)
    write_artifact(writer, artifact)
    return writer.finalize()


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no manifest at {path}") from exc


def read_table(path):
    """Header and rows of a result CSV, numeric cells converted to float."""
    header, rows = _read_csv(Path(path))
    out = []
    for row in rows:
        conv = []
        for c in row:
            try:
                conv.append(float(c))
            except ValueError:
                conv.append(c)
        out.append(conv)
    return header, out
