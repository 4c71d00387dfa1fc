import json

import numpy as np
import pytest

from lsapc.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, build_parser, main
from lsapc.io import load_dataset, read_manifest, read_table


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run_cli("simulate", "--output-dir", out, "--p", 12, "--support", 4, "--n", 30,
                   "--noise-sd", 1.0, "--amplitude", 3.0, "--seed", 5) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def corr_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corr")
    assert run_cli("simulate", "--output-dir", out, "--p", 4, "--support", 2, "--n", 40,
                   "--sites", 4, "--xi", 0.3, "--noise-sd", 1.0, "--amplitude", 2.0) == EXIT_OK
    return out


class TestSimulate:
    def test_outputs(self, sim_dir):
        data = load_dataset(sim_dir / "dataset")
        assert (data.n, data.p) == (30, 12)
        _, rows = read_table(sim_dir / "beta_true.csv")
        assert sum(r[1] != 0 for r in rows) == 4
        m = read_manifest(sim_dir)
        assert m["config"]["task"] == "simulate" and m["seed"] == 5
        assert "dataset/y.csv" in m["files"] and "beta_true.csv" in m["files"]

    def test_default_support_follows_shape(self, tmp_path):
        assert run_cli("simulate", "--output-dir", tmp_path, "--shape", "PiecewiseConstant",
                       "--p", 30, "--n", 5) == EXIT_OK
        _, rows = read_table(tmp_path / "beta_true.csv")
        assert sum(r[1] != 0 for r in rows) == 10

    def test_correlated_layout(self, corr_dir):
        data = load_dataset(corr_dir / "dataset")
        np.testing.assert_array_equal(data.time_index, np.tile(np.arange(10), 4))

    def test_sites_must_divide_n(self, tmp_path):
        assert run_cli("simulate", "--output-dir", tmp_path, "--n", 10, "--sites", 3) \
            == EXIT_CONFIG


class TestFits:
    def test_gibbs(self, sim_dir, tmp_path):
        assert run_cli("fit-gibbs", "--dataset", sim_dir / "dataset", "--output-dir", tmp_path,
                       "--n-iter", 80, "--burn-in", 20, "--a", 1, "--b", 1) == EXIT_OK
        m = read_manifest(tmp_path)
        assert set(m["files"]) == {"chain.csv", "summary.csv", "estimate.csv"}
        assert m["config"]["gibbs"]["n_iter"] == 80 and m["config"]["lsapc"]["a"] == 1.0
        _, rows = read_table(tmp_path / "chain.csv")
        assert len(rows) == 60

    def test_vb_positivity(self, sim_dir, tmp_path):
        assert run_cli("fit-vb", "--dataset", sim_dir / "dataset", "--output-dir", tmp_path,
                       "--positivity") == EXIT_OK
        _, rows = read_table(tmp_path / "estimate.csv")
        assert min(r[1] for r in rows) >= 0

    def test_fl_no_cv(self, sim_dir, tmp_path):
        assert run_cli("fit-fl", "--dataset", sim_dir / "dataset", "--output-dir", tmp_path,
                       "--lambda1", 0.5, "--lambda2", 2.0, "--no-cv") == EXIT_OK
        fit = json.loads((tmp_path / "fit.json").read_text())
        assert "objective" in fit
        assert read_manifest(tmp_path)["config"]["fl_cv"] is False

    def test_fl_cv(self, sim_dir, tmp_path):
        assert run_cli("fit-fl", "--dataset", sim_dir / "dataset", "--output-dir", tmp_path,
                       "--folds", 3) == EXIT_OK


@pytest.fixture(scope="module")
def select_dir(corr_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("select")
    assert run_cli("select-model", "--dataset", corr_dir / "dataset", "--output-dir", out,
                   "--xi-grid", "0,0.3,0.9", "--n-iter", 200, "--burn-in", 50,
                   "--a", 1, "--b", 1) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def study_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("study")
    assert run_cli("study", "--output-dir", out, "--p", 10, "--support", 3,
                   "--amplitude", 2.0, "--noise-sd", 1.0, "--n-values", "8,12",
                   "--n-reps", 1, "--methods", "FL,LSAPC_VB", "--n-iter", 60,
                   "--burn-in", 10) == EXIT_OK
    return out


class TestSelectAndReport:
    def test_select_outputs(self, select_dir):
        header, rows = read_table(select_dir / "selection.csv")
        assert [r[0] for r in rows] == [0.0, 0.3]
        sel = json.loads((select_dir / "selection.json").read_text())
        assert sel["dropped_xi"] == [0.9]

    def test_study_outputs(self, study_dir):
        header, rows = read_table(study_dir / "results.csv")
        assert header == ["rep", "n", "method", "ae", "status"] and len(rows) == 4
        timings = json.loads((study_dir / "timings.json").read_text())
        assert len(timings["wall_time_s"]) == 4

    def test_report(self, select_dir, study_dir, tmp_path, capsys):
        assert run_cli("report", select_dir, study_dir, "--output-dir", tmp_path) == EXIT_OK
        text = capsys.readouterr().out
        assert "relative log marginal likelihood" in text and "absolute error" in text
        _, rows = read_table(tmp_path / "report_ae.csv")
        assert {r[2] for r in rows} == {"FL", "LSAPC_VB"}

    def test_report_nothing_reportable(self, sim_dir):
        assert run_cli("report", sim_dir) == EXIT_DATA


class TestExitCodes:
    def test_missing_output_dir(self):
        assert run_cli("simulate") == EXIT_CONFIG

    def test_bad_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        assert run_cli("simulate", "--config", cfg, "--output-dir", tmp_path) == EXIT_CONFIG

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"lsapc": {"alpha": 1}}))
        assert run_cli("fit-vb", "--config", cfg, "--output-dir", tmp_path,
                       "--dataset", tmp_path) == EXIT_CONFIG

    def test_invalid_prior(self, sim_dir, tmp_path):
        assert run_cli("fit-vb", "--dataset", sim_dir / "dataset", "--output-dir", tmp_path,
                       "--a", -1) == EXIT_CONFIG

    def test_missing_dataset(self, tmp_path):
        assert run_cli("fit-vb", "--dataset", tmp_path / "none", "--output-dir", tmp_path) \
            == EXIT_DATA

    def test_select_without_metadata(self, sim_dir, tmp_path):
        assert run_cli("select-model", "--dataset", sim_dir / "dataset",
                       "--output-dir", tmp_path) == EXIT_DATA

    def test_numerical_failure(self, corr_dir, tmp_path):
        assert run_cli("select-model", "--dataset", corr_dir / "dataset", "--output-dir",
                       tmp_path, "--xi-grid", "0.9") == EXIT_NUMERICAL

    def test_argparse_rejects_bad_list(self):
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args(["study", "--n-values", "a,b"])
        assert info.value.code == 2

    def test_config_file_with_flag_override(self, sim_dir, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"dataset_path": str(sim_dir / "dataset"),
                                   "vb": {"max_iter": 7, "tol": 1e-3}}))
        out = tmp_path / "out"
        assert run_cli("fit-vb", "--config", cfg, "--output-dir", out, "--vb-tol", 1e-4) \
            == EXIT_OK
        vb = read_manifest(out)["config"]["vb"]
        assert vb == {"max_iter": 7, "tol": 1e-4}


class TestDeterminism:
    def test_rerun_byte_identical(self, sim_dir, tmp_path):
        outs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            assert run_cli("fit-gibbs", "--dataset", sim_dir / "dataset", "--output-dir", out,
                           "--n-iter", 50, "--burn-in", 10, "--seed", 9) == EXIT_OK
            outs.append(out)
        for name in ("chain.csv", "summary.csv", "estimate.csv", "manifest.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_seed_changes_chain(self, sim_dir, tmp_path):
        for seed in (1, 2):
            run_cli("fit-gibbs", "--dataset", sim_dir / "dataset", "--output-dir",
                    tmp_path / str(seed), "--n-iter", 30, "--burn-in", 5, "--seed", seed)
        assert (tmp_path / "1" / "chain.csv").read_bytes() != \
            (tmp_path / "2" / "chain.csv").read_bytes()
