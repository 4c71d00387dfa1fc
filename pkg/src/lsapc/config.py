"""Experiment configuration: one JSON document per run."""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .covariance import DEFAULT_XI_GRID
from .errors import ConfigError, LsapcError
from .fused_lasso import FlConfig
from .gibbs import GibbsSettings
from .model import LsapcConfig


class Task(str, enum.Enum):
    SIMULATE = "simulate"
    FIT_GIBBS = "fit-gibbs"
    FIT_VB = "fit-vb"
    FIT_FL = "fit-fl"
    SELECT_MODEL = "select-model"
    STUDY = "study"


@dataclass(frozen=True)
class VbSettings:
    tol: float = 1e-8
    max_iter: int = 5000


@dataclass(frozen=True)
class SimulateSettings:
    shape: str = "ExpBell"
    p: int = 100
    support: Optional[int] = None
    amplitude: float = 100.0
    n: int = 40
    x_sd: float = 2.0
    noise_sd: float = 200.0
    # a positive site count switches to the correlated-noise layout
    sites: int = 0
    xi: float = 0.0


@dataclass(frozen=True)
class StudySettings:
    shape: str = "ExpBell"
    p: int = 100
    support: Optional[int] = None
    amplitude: float = 100.0
    n_values: tuple = (40, 80, 160)
    noise_sd: float = 200.0
    x_sd: float = 2.0
    n_reps: int = 10
    methods: tuple = ("FL", "LSAPC_GS", "LSAPC_VB", "LSAPC_GS_l0", "LSAPC_VB_l0")
    cv_folds: int = 5


_SECTIONS = {
    "lsapc": LsapcConfig,
    "gibbs": GibbsSettings,
    "fl": FlConfig,
    "vb": VbSettings,
    "simulate": SimulateSettings,
    "study": StudySettings,
}

# sub-configs each task actually reads
REQUIRED = {
    Task.SIMULATE: ("simulate",),
    Task.FIT_GIBBS: ("lsapc", "gibbs"),
    Task.FIT_VB: ("lsapc", "vb"),
    Task.FIT_FL: ("fl",),
    Task.SELECT_MODEL: ("lsapc", "gibbs", "vb"),
    Task.STUDY: ("study", "lsapc", "gibbs", "vb"),
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"'{where}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{where}': {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, LsapcError) as exc:
        raise ConfigError(f"invalid '{where}' section: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    task: Task
    output_dir: str
    seed: int = 0
    dataset_path: Optional[str] = None
    lsapc: LsapcConfig = field(default_factory=LsapcConfig)
    gibbs: GibbsSettings = field(default_factory=GibbsSettings)
    fl: FlConfig = field(default_factory=FlConfig)
    vb: VbSettings = field(default_factory=VbSettings)
    simulate: SimulateSettings = field(default_factory=SimulateSettings)
    study: StudySettings = field(default_factory=StudySettings)
    xi_grid: tuple = DEFAULT_XI_GRID
    # fit-fl picks the penalties by cross-validation unless this is off
    fl_cv: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, "task", Task(self.task))
        except ValueError as exc:
            raise ConfigError(f"unknown task {self.task!r}") from exc
        if not self.output_dir:
            raise ConfigError("output_dir is required")
        if self.task in (Task.FIT_GIBBS, Task.FIT_VB, Task.FIT_FL, Task.SELECT_MODEL) \
                and not self.dataset_path:
            raise ConfigError(f"task {self.task.value} needs dataset_path")
        if self.task is Task.SELECT_MODEL and len(self.xi_grid) == 0:
            raise ConfigError("xi_grid must be nonempty")
        # the run seed drives every random stream
        object.__setattr__(self, "gibbs", replace(self.gibbs, seed=int(self.seed)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "task" not in d:
            raise ConfigError("config needs a 'task'")
        kw = dict(d)
        for name, sub in _SECTIONS.items():
            if name in kw:
                kw[name] = _build(sub, kw[name], name)
        if "xi_grid" in kw:
            try:
                kw["xi_grid"] = tuple(float(v) for v in kw["xi_grid"])
            except (TypeError, ValueError) as exc:
                raise ConfigError("xi_grid must be a list of numbers") from exc
        if "seed" in kw and not isinstance(kw["seed"], int):
            raise ConfigError("seed must be an integer")
        return cls(**kw)

    def to_dict(self) -> dict:
        """Everything that determines the outputs (the output location does not)."""
        out = {"task": self.task.value, "seed": self.seed, "dataset_path": self.dataset_path}
        if self.task is Task.SELECT_MODEL:
            out["xi_grid"] = list(self.xi_grid)
        if self.task is Task.FIT_FL:
            out["fl_cv"] = self.fl_cv
        for name in REQUIRED[self.task]:
            out[name] = _plain(asdict(getattr(self, name)))
        return out


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_config(path) -> dict:
    try:
        with open(Path(path), encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
