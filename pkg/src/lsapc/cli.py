"""Command-line interface.

Every subcommand reads an optional JSON config, applies flag overrides,
runs, and writes its outputs plus ``manifest.json`` into ``--output-dir``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, Task, load_config
from .covariance import default_n_jobs, grid_select
from .errors import (
    ConfigError, DataError, DimensionError, InvalidParameterError, LsapcError, NumericalError,
)
from .fused_lasso import cross_validate, fit_fused_lasso
from .gibbs import map_point_estimate, run_chain
from .io import ResultWriter, load_dataset, read_manifest, read_table, write_artifact
from .simulation import (
    GroundTruthSpec, StudyConfig, make_ground_truth, run_study, simulate_correlated_dataset,
    simulate_dataset,
)
from .vb import run_vb, vb_point_estimate

logger = logging.getLogger("lsapc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

# flag dest -> (config section or None for top level, key)
OVERRIDES = {
    "output_dir": (None, "output_dir"),
    "seed": (None, "seed"),
    "dataset": (None, "dataset_path"),
    "xi_grid": (None, "xi_grid"),
    "a": ("lsapc", "a"), "b": ("lsapc", "b"), "c": ("lsapc", "c"), "d": ("lsapc", "d"),
    "l0": ("lsapc", "l0"),
    "positivity": ("lsapc", "positivity"),
    "fixed_l": ("lsapc", "fixed_l"),
    "n_iter": ("gibbs", "n_iter"), "burn_in": ("gibbs", "burn_in"), "thin": ("gibbs", "thin"),
    "vb_tol": ("vb", "tol"), "vb_max_iter": ("vb", "max_iter"),
    "lambda1": ("fl", "lambda1"), "lambda2": ("fl", "lambda2"), "folds": ("fl", "folds"),
    "shape": ("simulate", "shape"), "p": ("simulate", "p"), "support": ("simulate", "support"),
    "amplitude": ("simulate", "amplitude"), "n": ("simulate", "n"),
    "x_sd": ("simulate", "x_sd"), "noise_sd": ("simulate", "noise_sd"),
    "sites": ("simulate", "sites"), "xi": ("simulate", "xi"),
    "n_values": ("study", "n_values"), "n_reps": ("study", "n_reps"),
    "methods": ("study", "methods"),
}

# study reuses the ground-truth flags of simulate
STUDY_SHARED = ("shape", "p", "support", "amplitude", "x_sd", "noise_sd")


def _common(sp):
    sp.add_argument("--config", help="JSON config file; flags override its values")
    sp.add_argument("--output-dir", help="directory for results and the manifest")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, default=None,
                    help="worker processes (default: $LSAPC_NUM_THREADS or 1)")
    sp.add_argument("-v", "--verbose", action="store_true")


def _prior(sp):
    g = sp.add_argument_group("prior")
    for name in ("a", "b", "c", "d"):
        g.add_argument(f"--{name}", type=float)
    g.add_argument("--l0", type=float)
    g.add_argument("--positivity", action="store_true", default=None)
    g.add_argument("--fixed-l", type=float)


def _gibbs(sp):
    g = sp.add_argument_group("gibbs")
    g.add_argument("--n-iter", type=int)
    g.add_argument("--burn-in", type=int)
    g.add_argument("--thin", type=int)


def _vb(sp):
    g = sp.add_argument_group("variational")
    g.add_argument("--vb-tol", type=float)
    g.add_argument("--vb-max-iter", type=int)


def _truth(sp):
    g = sp.add_argument_group("ground truth")
    g.add_argument("--shape", choices=("ExpBell", "PiecewiseConstant"))
    g.add_argument("--p", type=int)
    g.add_argument("--support", type=int)
    g.add_argument("--amplitude", type=float)
    g.add_argument("--x-sd", type=float)
    g.add_argument("--noise-sd", type=float)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text}") from exc


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lsapc", description="Sparse and smooth Bayesian linear regression (LS-APC).")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="generate a synthetic dataset")
    _common(sp)
    _truth(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--sites", type=int, help="sites for correlated noise (n = sites * slots)")
    sp.add_argument("--xi", type=float, help="adjacent-slot noise correlation")

    for name, help_ in (("fit-gibbs", "run the Gibbs sampler"),
                        ("fit-vb", "run variational Bayes")):
        sp = sub.add_parser(name, help=help_)
        _common(sp)
        sp.add_argument("--dataset", help="dataset directory")
        _prior(sp)
        _gibbs(sp) if name == "fit-gibbs" else _vb(sp)

    sp = sub.add_parser("fit-fl", help="fit the fused lasso")
    _common(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--lambda1", type=float)
    sp.add_argument("--lambda2", type=float)
    sp.add_argument("--folds", type=int)
    sp.add_argument("--no-cv", action="store_true",
                    help="use --lambda1/--lambda2 as given instead of cross-validating")

    sp = sub.add_parser("select-model", help="score a grid of noise correlations")
    _common(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--xi-grid", type=_float_list)
    _prior(sp)
    _gibbs(sp)
    _vb(sp)

    sp = sub.add_parser("study", help="Monte Carlo comparison of all methods")
    _common(sp)
    _truth(sp)
    sp.add_argument("--n-values", type=_int_list)
    sp.add_argument("--n-reps", type=int)
    sp.add_argument("--methods", type=lambda s: [m for m in s.split(",") if m])
    _prior(sp)
    _gibbs(sp)
    _vb(sp)

    sp = sub.add_parser("report", help="aggregate finished runs into comparison tables")
    sp.add_argument("runs", nargs="+", help="output directories of earlier runs")
    sp.add_argument("--output-dir")
    sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    """Config file values, then flags, validated."""
    raw = load_config(args.config) if getattr(args, "config", None) else {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = json.loads(json.dumps(raw))
    raw["task"] = args.command
    given = {k: v for k, v in vars(args).items() if v is not None and k in OVERRIDES}
    for dest, value in given.items():
        section, key = OVERRIDES[dest]
        if args.command == "study" and dest in STUDY_SHARED:
            section = "study"
        if section is None:
            raw[key] = value
        else:
            raw.setdefault(section, {})[key] = value
    if args.command == "fit-fl" and args.no_cv:
        raw["fl_cv"] = False
    if not raw.get("output_dir"):
        raise ConfigError("an output directory is required (--output-dir or config)")
    return ExperimentConfig.from_dict(raw)


def cmd_simulate(cfg: ExperimentConfig, writer: ResultWriter, jobs: int):
    s = cfg.simulate
    try:
        spec = GroundTruthSpec(s.shape, s.p, s.support, s.amplitude)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    beta = make_ground_truth(spec)
    if s.sites > 0:
        if s.n % s.sites:
            raise ConfigError(f"n={s.n} is not a multiple of sites={s.sites}")
        data = simulate_correlated_dataset(beta, s.sites, s.n // s.sites, s.xi,
                                           s.x_sd, s.noise_sd, cfg.seed)
    else:
        data = simulate_dataset(beta, s.n, s.x_sd, s.noise_sd, cfg.seed)
    writer.dataset("dataset", data)
    writer.csv("beta_true.csv", ["index", "beta"], ([j + 1, v] for j, v in enumerate(beta)))


def cmd_fit_gibbs(cfg, writer, jobs):
    data = load_dataset(cfg.dataset_path)
    chain = run_chain(data, cfg.lsapc, cfg.gibbs)
    write_artifact(writer, chain)
    write_artifact(writer, map_point_estimate(chain))


def cmd_fit_vb(cfg, writer, jobs):
    data = load_dataset(cfg.dataset_path)
    q = run_vb(data, cfg.lsapc, cfg.vb.tol, cfg.vb.max_iter)
    write_artifact(writer, q)
    write_artifact(writer, vb_point_estimate(q, data, cfg.lsapc))


def cmd_fit_fl(cfg, writer, jobs):
    data = load_dataset(cfg.dataset_path)
    fl = cfg.fl
    if cfg.fl_cv:
        fl = cross_validate(data, folds=fl.folds, seed=cfg.seed, base=fl)
    est = fit_fused_lasso(data, fl)
    write_artifact(writer, est)
    writer.json("fit.json", est.info)


def cmd_select_model(cfg, writer, jobs):
    data = load_dataset(cfg.dataset_path)
    table = grid_select(data, cfg.xi_grid, cfg.lsapc, cfg.gibbs, cfg.vb.tol, cfg.vb.max_iter,
                        n_jobs=jobs)
    write_artifact(writer, table)
    writer.json("selection.json", {
        "selected_xi": table.selected_xi,
        "dropped_xi": list(table.dropped),
        "stderr": {m: table.stderr[:, k].tolist() for k, m in enumerate(table.methods)},
    })


def cmd_study(cfg, writer, jobs):
    s = cfg.study
    try:
        study = StudyConfig(
            spec=GroundTruthSpec(s.shape, s.p, s.support, s.amplitude),
            n_values=s.n_values, noise_sd=s.noise_sd, x_sd=s.x_sd, n_reps=s.n_reps,
            seed=cfg.seed, methods=s.methods, lsapc=cfg.lsapc, gibbs=cfg.gibbs,
            vb_tol=cfg.vb.tol, vb_max_iter=cfg.vb.max_iter, cv_folds=s.cv_folds,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_artifact(writer, run_study(study, n_jobs=jobs))


COMMANDS = {
    Task.SIMULATE: cmd_simulate,
    Task.FIT_GIBBS: cmd_fit_gibbs,
    Task.FIT_VB: cmd_fit_vb,
    Task.FIT_FL: cmd_fit_fl,
    Task.SELECT_MODEL: cmd_select_model,
    Task.STUDY: cmd_study,
}


def _fmt_cell(v):
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def _print_table(title, header, rows, out):
    print(title, file=out)
    print("\t".join(header), file=out)
    for r in rows:
        print("\t".join(_fmt_cell(v) for v in r), file=out)
    print(file=out)


def cmd_report(args, out=None) -> int:
    out = out or sys.stdout
    sel_rows, ae_rows = [], []
    for run in args.runs:
        manifest = read_manifest(run)
        task = manifest.get("config", {}).get("task")
        root = Path(run)
        if task == Task.SELECT_MODEL.value:
            header, rows = read_table(root / "selection.csv")
            rel = [i for i, h in enumerate(header) if h.endswith("_rel")]
            for r in rows:
                sel_rows.append([run, r[0], *(r[i] for i in rel)])
        elif task == Task.STUDY.value:
            with open(root / "summary.json", encoding="utf-8") as fh:
                summary = json.load(fh)
            for n in sorted(summary, key=int):
                for method, st in sorted(summary[n].items()):
                    ae_rows.append([run, int(n), method, st["count"], st["median"],
                                    st["q25"], st["q75"]])
        else:
            logger.info("skipping %s (task %s has no report table)", run, task)
    if not sel_rows and not ae_rows:
        raise DataError("none of the given runs has a reportable table")
    sel_header = ["run", "xi", "gs_map_rel", "gs_median_rel", "vb_rel"]
    ae_header = ["run", "n", "method", "count", "median_ae", "q25_ae", "q75_ae"]
    if sel_rows:
        _print_table("relative log marginal likelihood per xi", sel_header, sel_rows, out)
    if ae_rows:
        _print_table("absolute error by sample size and method", ae_header, ae_rows, out)
    if args.output_dir:
        writer = ResultWriter(args.output_dir, {"task": "report", "runs": list(args.runs)})
        if sel_rows:
            writer.csv("report_selection.csv", sel_header, sel_rows)
        if ae_rows:
            writer.csv("report_ae.csv", ae_header, ae_rows)
        writer.finalize()
    return EXIT_OK


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        return cmd_report(args)
    cfg = resolve_config(args)
    jobs = args.jobs if args.jobs is not None else default_n_jobs()
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    writer = ResultWriter(cfg.output_dir, cfg.to_dict(), cfg.seed)
    with warnings.catch_warnings():
        if not args.verbose:
            warnings.simplefilter("ignore", RuntimeWarning)
        COMMANDS[cfg.task](cfg, writer, jobs)
    manifest = writer.finalize()
    logger.info("wrote %s", manifest)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ConfigError, InvalidParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LsapcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
