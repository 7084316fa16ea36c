import csv
import json

import numpy as np
import pytest
from scipy.signal import lfilter

from cfcalib.cli import EXIT_CAPABILITY, EXIT_DATA, EXIT_NONCONVERGED, EXIT_OK, main
from cfcalib.data import HEADER, Dataset, save_csv
from cfcalib.records import CfInstance


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", out, "--per-group", 3, "--steps", 80, "--seed", 3, "--noise-beta", 0.1) == EXIT_OK
    return out / "data.csv"


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


class TestSynth:
    def test_files_and_determinism(self, tmp_path):
        for d in ("a", "b"):
            assert run("synth", "--out", tmp_path / d, "--per-group", 2, "--steps", 40, "--seed", 9) == EXIT_OK
        for name in ("data.csv", "truth.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert read_rows(tmp_path / "a" / "data.csv")[0] == list(HEADER)
        assert len(read_rows(tmp_path / "a" / "data.csv")) == 81
        cfg = json.loads((tmp_path / "a" / "config.json").read_text())
        assert cfg["seed"] == 9

    def test_truth_override(self, tmp_path):
        (tmp_path / "t.yaml").write_text("all: {v0: 25.0}\n")
        assert run("synth", "--out", tmp_path / "o", "--per-group", 1, "--steps", 20, "--truth", tmp_path / "t.yaml") == EXIT_OK
        assert "g0.v0=25" in (tmp_path / "o" / "truth.txt").read_text()

    def test_config_file_defaults(self, tmp_path):
        (tmp_path / "c.yaml").write_text("seed: 9\nper_group: 2\nsteps: 40\n")
        assert run("synth", "--out", tmp_path / "c", "--config", tmp_path / "c.yaml") == EXIT_OK
        assert run("synth", "--out", tmp_path / "d", "--per-group", 2, "--steps", 40, "--seed", 9) == EXIT_OK
        assert (tmp_path / "c" / "data.csv").read_bytes() == (tmp_path / "d" / "data.csv").read_bytes()


class TestAnalyze:
    def test_ar4_accelerations(self, tmp_path):
        rng = np.random.default_rng(0)
        insts = []
        for k in range(5):
            a = lfilter([1.0], [1.0, -0.3, -0.2, -0.15, -0.25], rng.normal(size=3000))[500:]
            n = len(a)
            insts.append(CfInstance(f"i{k}", f"d{k}", 4, np.full(n, 10.0), a, np.full(n, 10.0), np.zeros(n), np.zeros(n), np.full(n, 20.0)))
        save_csv(Dataset(insts), tmp_path / "ar4.csv")
        assert run("analyze", tmp_path / "ar4.csv", "--out", tmp_path / "o") == EXIT_OK
        rows = read_rows(tmp_path / "o" / "pacf_lags.csv")[1:]
        counts = {int(k): int(v) for k, v in rows}
        assert max(counts, key=counts.get) == 4
        for name in ("frequency_framework.csv", "frequency_driver.csv", "histograms.csv", "describe.csv", "histograms.png"):
            assert (tmp_path / "o" / name).exists()

    def test_deterministic(self, tmp_path, small_data):
        for d in ("a", "b"):
            assert run("analyze", small_data, "--out", tmp_path / d) == EXIT_OK
        for name in ("pacf_lags.csv", "histograms.csv", "describe.csv", "frequency_framework_driver.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_empty_dataset(self, tmp_path, capsys):
        (tmp_path / "empty.csv").write_text(",".join(HEADER) + "\n")
        assert run("analyze", tmp_path / "empty.csv", "--out", tmp_path / "o") == EXIT_DATA
        assert "no instances" in capsys.readouterr().err

    def test_malformed_csv(self, tmp_path):
        (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
        assert run("analyze", tmp_path / "bad.csv", "--out", tmp_path / "o") == EXIT_DATA

    def test_missing_file(self, tmp_path):
        assert run("analyze", tmp_path / "nope.csv", "--out", tmp_path / "o") == EXIT_DATA
        assert run("analyze", "--out", tmp_path / "o") == EXIT_DATA


class TestCalibrate:
    def test_hmc_with_w99_rejected(self, tmp_path, small_data):
        assert run("calibrate", small_data, "--model", "w99", "--method", "hmc", "--out", tmp_path / "o") == EXIT_CAPABILITY

    def test_de_outputs(self, tmp_path, small_data):
        args = ("calibrate", small_data, "--method", "de", "--generations", 5, "--lambda", "0,0.001", "--seed", 2)
        assert run(*args, "--out", tmp_path / "a") == EXIT_OK
        assert run(*args, "--out", tmp_path / "b") == EXIT_OK
        table = read_rows(tmp_path / "a" / "posterior_table.csv")
        assert table[0][1:] == ["lambda=0", "lambda=0.001"]
        assert table[-1][0] == "RMSE"
        for name in ("posterior_table.csv", "rmse.csv", "fitness_lambda_0.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_nonconvergence_keeps_outputs(self, tmp_path, small_data):
        code = run("calibrate", small_data, "--increment", 20, "--max-runs", 1, "--threshold", 1e-9, "--out", tmp_path / "o")
        assert code == EXIT_NONCONVERGED
        assert (tmp_path / "o" / "trace_sigma_10.csv").exists()
        assert (tmp_path / "o" / "posterior_table.csv").exists()


class TestValidate:
    def test_rwmh_fit(self, tmp_path, small_data):
        fit = tmp_path / "fit"
        code = run("calibrate", small_data, "--increment", 200, "--max-runs", 2, "--threshold", 10, "--seed", 1, "--out", fit)
        assert code == EXIT_OK
        assert run("validate", fit, "--draws", 150, "--out", tmp_path / "v1") == EXIT_OK
        assert run("validate", fit, "--draws", 150, "--out", tmp_path / "v2") == EXIT_OK
        for name in ("pareto_k_sigma_10.csv", "criteria_sigma_10.csv", "summary_sigma_10.txt"):
            assert (tmp_path / "v1" / name).read_bytes() == (tmp_path / "v2" / name).read_bytes()
        k_rows = read_rows(tmp_path / "v1" / "pareto_k_sigma_10.csv")
        assert len(k_rows) == 1 + 3 * 80
        crit = dict(read_rows(tmp_path / "v1" / "criteria_sigma_10.csv")[1:])
        assert int(crit["n_bad_k"]) == sum(int(r[3]) for r in k_rows[1:])

    def test_de_fit_is_rmse_only(self, tmp_path, small_data, capsys):
        fit = tmp_path / "fit"
        assert run("calibrate", small_data, "--method", "de", "--generations", 3, "--out", fit) == EXIT_OK
        capsys.readouterr()
        assert run("validate", fit, "--out", tmp_path / "v") == EXIT_OK
        assert "RMSE only" in capsys.readouterr().out
        assert sorted(p.name for p in (tmp_path / "v").iterdir()) == ["rmse.csv"]


class TestTune:
    def test_grid(self, tmp_path, small_data):
        args = ("tune", small_data, "--generations", 3, "--cr-values", "0.5,0.9", "--f-values", "0.5", "--lambda", "0,1e-4")
        assert run(*args, "--out", tmp_path / "a") == EXIT_OK
        assert run(*args, "--out", tmp_path / "b") == EXIT_OK
        a = (tmp_path / "a" / "tuning_grid.csv").read_bytes()
        assert a == (tmp_path / "b" / "tuning_grid.csv").read_bytes()
        assert len(a.decode().splitlines()) == 5

    def test_bayesopt(self, tmp_path, small_data):
        assert run("tune", small_data, "--tune", "bo", "--evals", 6, "--generations", 2, "--out", tmp_path / "o") == EXIT_OK
        assert len(read_rows(tmp_path / "o" / "tuning_bo.csv")) == 7

    def test_bayesopt_too_few_evals(self, tmp_path, small_data):
        assert run("tune", small_data, "--tune", "bo", "--evals", 4, "--generations", 2, "--out", tmp_path / "o") != EXIT_OK


class TestSimulate:
    @pytest.mark.parametrize("model", ["idm", "w99", "wzdm"])
    def test_models(self, tmp_path, model):
        for d in ("a", "b"):
            assert run("simulate", "--model", model, "--steps", 50, "--seed", 4, "--out", tmp_path / d) == EXIT_OK
        a = (tmp_path / "a" / "trajectory.csv").read_bytes()
        assert a == (tmp_path / "b" / "trajectory.csv").read_bytes()
        assert len(a.decode().splitlines()) == 51

    def test_leader_file(self, tmp_path):
        np.savetxt(tmp_path / "lead.csv", np.full(30, 15.0), delimiter=",")
        assert run("simulate", "--leader", tmp_path / "lead.csv", "--out", tmp_path / "o") == EXIT_OK
        rows = read_rows(tmp_path / "o" / "trajectory.csv")
        assert len(rows) == 31
        assert all(float(r[HEADER.index("v_l")]) == 15.0 for r in rows[1:])
