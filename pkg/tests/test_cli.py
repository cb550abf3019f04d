import json

import numpy as np
import pytest

from gradcert.cli import main
from gradcert.report import read_csv


@pytest.fixture()
def scalar_plant_file(tmp_path):
    path = tmp_path / "scalar.json"
    path.write_text(json.dumps({"A": [[-1.0]], "B": [[1.0]]}))
    return path


@pytest.fixture()
def bounds_file(tmp_path):
    path = tmp_path / "l09.json"
    path.write_text(json.dumps({"xi_lower": [[-0.9]], "xi_upper": [[0.9]]}))
    return path


class TestCertify:
    def test_scalar_certificate(self, tmp_path, scalar_plant_file, bounds_file, capsys):
        code = main(["--workdir", str(tmp_path), "certify",
                     "--plant", "scalar.json", "--bounds", "l09.json"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["feasible"] is True
        cert = json.loads((tmp_path / "certificate.json").read_text())
        assert cert["gamma"] < 100.0
        assert "config_hash" in cert
        assert (tmp_path / "bundle_certify.json").exists()

    def test_missing_file_exit_2(self, tmp_path, capsys):
        code = main(["--workdir", str(tmp_path), "certify",
                     "--plant", "absent.json", "--bounds", "also_absent.json"])
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "FileNotFound"

    def test_bad_config_exit_2(self, tmp_path, scalar_plant_file, capsys):
        (tmp_path / "bad.json").write_text(json.dumps({"bogus": 1}))
        code = main(["--workdir", str(tmp_path), "certify",
                     "--plant", "scalar.json", "--bounds", "bad.json"])
        assert code == 2


class TestSweep:
    def test_scalar_sweep_csv(self, tmp_path, scalar_plant_file, capsys):
        code = main(["--workdir", str(tmp_path), "sweep", "--plant", "scalar.json",
                     "--mode", "l2", "--grid", "0.3,0.6,0.9,1.2",
                     "--no-gamma-bisect"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        header, rows = read_csv(tmp_path / "sweep_l2_only.csv")
        assert header == ["mode", "l", "feasible", "gamma", "solve_ms"]
        feas = [int(r[2]) for r in rows]
        assert feas == [1, 1, 1, 0]
        assert out["monotone"] is True

    def test_determinism_modulo_timing(self, tmp_path, scalar_plant_file):
        argv = ["--workdir", str(tmp_path), "sweep", "--plant", "scalar.json",
                "--mode", "l2", "--grid", "0.5,1.5", "--no-gamma-bisect"]
        main(argv)
        first = [r[:4] for r in read_csv(tmp_path / "sweep_l2_only.csv")[1]]
        main(argv)
        second = [r[:4] for r in read_csv(tmp_path / "sweep_l2_only.csv")[1]]
        assert first == second


class TestSimulateAndGain:
    def test_simulate_writes_trajectory(self, tmp_path, capsys):
        code = main(["--workdir", str(tmp_path), "simulate", "--preset", "flight4",
                     "--seed", "7", "--h", "1e-3", "--T", "0.05"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["diverged"] is False
        header, rows = read_csv(tmp_path / "trajectory.csv")
        assert header[0] == "t" and header[1] == "x0"
        assert len(rows) == 51
        assert header[-1] == "r"

    def test_gain_json(self, tmp_path, capsys):
        code = main(["--workdir", str(tmp_path), "gain", "--preset", "power_swing",
                     "--n-excitations", "2", "--T", "2.0", "--h", "1e-2"])
        assert code == 0
        payload = json.loads((tmp_path / "gain.json").read_text())
        assert payload["certified_gamma"] is not None
        assert payload["empirical_gain"] <= payload["certified_gamma"]


class TestTrainAndReport:
    def test_train_then_report(self, tmp_path, capsys):
        code = main(["--workdir", str(tmp_path), "train", "--preset", "power_swing",
                     "--mode", "ht", "--lcert", "0.5", "--iters", "3",
                     "--seed", "3", "--horizon-steps", "20", "--substeps", "2",
                     "--h", "1e-2", "--n-rollouts", "2",
                     "--reward-scale", "1e-3", "--checkpoint-every", "2"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["final_lipschitz"] <= 0.5 * (1 + 1e-9)
        header, rows = read_csv(tmp_path / "train_power_swing10_ht.csv")
        assert header[:3] == ["iter", "mean_reward", "lipschitz"]
        assert len(rows) == 3
        assert (tmp_path / "pattern_power_swing10.json").exists()
        assert (tmp_path / "policy_power_swing10_ht_final.json").exists()

        # a sweep output so the report has margin data
        main(["--workdir", str(tmp_path), "sweep", "--preset", "power_swing",
              "--mode", "sparsity", "--grid", "0.5,8.0", "--no-gamma-bisect"])
        code = main(["--workdir", str(tmp_path), "report"])
        assert code == 0
        assert (tmp_path / "margin_curves.csv").exists()
        assert (tmp_path / "summary.txt").exists()
        assert (tmp_path / "margin_curves.png").exists()
        assert (tmp_path / "learning_curve_power_swing10_ht.png").exists()

    def test_report_without_sweeps_exit_2(self, tmp_path, capsys):
        code = main(["--workdir", str(tmp_path), "report"])
        assert code == 2


@pytest.fixture()
def two_state_plant_file(tmp_path):
    path = tmp_path / "two_state.json"
    path.write_text(json.dumps({"A": [[-1.0, 0.8], [0.0, -2.0]],
                                "B": [[1.0], [0.2]]}))
    return path


class TestThreeModeReport:
    def test_sweep_three_modes_and_summary_ordering(self, tmp_path, two_state_plant_file):
        # l2 < sparsity < nonhom for this loop (boundaries ~0.81 / 0.89 / 9.1)
        import numpy as np
        from gradcert.certifier import CertificationSetup, sweep_margin
        from gradcert.report import build_report, write_margin_csv
        from gradcert.system_model import load_plant

        plant, _ = load_plant(two_state_plant_file)
        setup = CertificationSetup(plant=plant,
                                   obs_mask=np.array([[True, False]]),
                                   sign_pattern=np.array([[-1.0, 0.0]]))
        grid = [0.5, 0.85, 2.0, 6.0]
        for mode in ("l2", "sparsity", "nonhom"):
            curve = sweep_margin(setup, mode, grid, gamma_tol=None)
            assert curve.monotone()
            write_margin_csv(tmp_path / f"sweep_{curve.constraint_mode}.csv", curve)
        summary = build_report(tmp_path, figures=True)
        got = summary["max_certified"]
        assert got["l2_only"] < got["sparsity"] < got["nonhomogeneous"]
        assert summary["strictly_increasing"] is True
        assert (tmp_path / "margin_curves.png").exists()


class TestThreadCap:
    def test_parallel_sweep_matches_serial(self, tmp_path, scalar_plant_file, monkeypatch):
        import numpy as np
        from gradcert.certifier import CertificationSetup, sweep_margin
        from gradcert.system_model import load_plant

        plant, _ = load_plant(scalar_plant_file)
        setup = CertificationSetup(plant=plant)
        grid = [0.3, 0.6, 0.9, 1.2]
        serial = sweep_margin(setup, "l2", grid, gamma_tol=None, threads=1)
        monkeypatch.setenv("IQC_CERT_THREADS", "3")
        parallel = sweep_margin(setup, "l2", grid, gamma_tol=None)
        assert serial.feasible == parallel.feasible
        assert serial.gamma_at == parallel.gamma_at
