import json
import os

import numpy as np
import pytest

from cnstn.cli import main
from cnstn.noise import DriverPath

SMALL = {"grid": {"dim": 2, "m": 4, "n": 16}}


def write(tmp_path, cfg, name="cfg.json"):
    f = tmp_path / name
    f.write_text(json.dumps(cfg))
    return str(f)


def summary(out):
    return json.loads((out / "summary.json").read_text())


def brownian(**noise):
    cfg = {**SMALL, "params": {"dt": 1 / 256, "T": 0.25},
           "initial": {"rho_modes": [[1, 0, 0.2, 0.0]], "u_modes": [[0, 0, 1, 0.5, 0.0]]},
           "noise": {"kind": "brownian", "q": {"type": "constant", "vectors": [[0.3, 0.1]]}, **noise}}
    return cfg


class TestSimulate:
    def test_noise_free(self, tmp_path):
        cfg = {**SMALL, "params": {"dt": 2e-3, "T": 0.1},
               "initial": {"rho_modes": [[1, 0, 0.2, 0.0]], "u_modes": [[0, 0, 1, 0.5, 0.0]]}}
        out = tmp_path / "o"
        assert main(["simulate", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
        s = summary(out)
        assert s["audit"]["verdict"] == "pass"
        assert (out / "ledger.csv").read_text().startswith("# schema: ledger/1.0")
        assert (out / "trajectory.csv").exists()
        assert (out / "trajectory.bin").exists()
        assert s["config_hash"] and "timestamp" not in json.dumps(s)

    def test_blowup_exit_code(self, tmp_path):
        cfg = {**SMALL, "params": {"dt": 0.1, "T": 1.0},
               "initial": {"rho_modes": [[1, 0, 0.6, 0.0]], "u_modes": [[0, 0, 1, 4.0, 0.0]]}}
        out = tmp_path / "o"
        with pytest.warns(Warning):
            code = main(["simulate", "--config", write(tmp_path, cfg), "--out", str(out)])
        assert code == 2
        assert summary(out)["blowup"]["t"] > 0

    def test_audit_disabled(self, tmp_path):
        cfg = {**SMALL, "params": {"dt": 2e-3, "T": 0.1},
               "initial": {"rho_modes": [[1, 0, 0.2, 0.0]], "u_modes": [[0, 0, 1, 0.5, 0.0]]},
               "audit": {"tolerance": 1e-15}}
        out = tmp_path / "o"
        assert main(["simulate", "--config", write(tmp_path, cfg), "--out", str(out)]) == 3
        cfg["audit"]["enabled"] = False
        assert main(["simulate", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
        assert summary(out)["audit"]["max_abs_residual"] > 0

    def test_config_error(self, tmp_path, capsys):
        code = main(["simulate", "--config", write(tmp_path, {"params": {"gamma": 0.5}})])
        assert code == 1
        assert "gamma must exceed N/2" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 1

    def test_seed_override(self, tmp_path):
        out = tmp_path / "o"
        main(["simulate", "--config", write(tmp_path, brownian()), "--out", str(out), "--seed", "42"])
        assert summary(out)["config"]["noise"]["seed"] == 42

    def test_bad_seed(self, tmp_path):
        assert main(["simulate", "--config", write(tmp_path, brownian()), "--seed", "-1"]) == 1


class TestAudit:
    def test_from_checkpoint(self, tmp_path):
        cfg = {**SMALL, "params": {"dt": 2e-3, "T": 0.05},
               "initial": {"rho_modes": [[1, 0, 0.2, 0.0]], "u_modes": [[0, 0, 1, 0.5, 0.0]]},
               "noise": {"kind": "smooth", "q": {"type": "constant", "vectors": [[0.3, 0.1]]},
                         "drivers": [{"drift": 1.0}]}}
        out = tmp_path / "o"
        f = write(tmp_path, cfg)
        assert main(["simulate", "--config", f, "--out", str(out)]) == 0
        assert main(["audit", "--config", f, "--out", str(out)]) == 0
        s = summary(out)
        assert s["source"] == "checkpoint"
        assert set(s["criteria"]) >= {"energy_mass", "pressure_weight", "flux_pair", "rho_log_rho",
                                      "renorm", "commutator_J5"}
        assert all(c["verdict"] == "pass" for c in s["criteria"].values())

    def test_without_checkpoint(self, tmp_path):
        out = tmp_path / "o"
        assert main(["audit", "--config", write(tmp_path, {**SMALL, "params": {"dt": 0.01, "T": 0.05}}),
                     "--out", str(out)]) == 0
        assert summary(out)["source"] == "simulation"


class TestWongZakai:
    def test_deterministic_path_identical_levels(self, tmp_path):
        t = np.linspace(0, 0.25, 65)
        DriverPath(t, 2.0 * t[:, None]).to_csv(tmp_path / "lin.csv")
        cfg = brownian(path_csv=str(tmp_path / "lin.csv"), wong_zakai_levels=[1, 3])
        out = tmp_path / "o"
        assert main(["wongzakai", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
        assert all(d == 0.0 for d in summary(out)["d_rho"])

    def test_reproducible(self, tmp_path):
        cfg = brownian(wong_zakai_levels=[1, 3], seed=5)
        f = write(tmp_path, cfg)
        main(["wongzakai", "--config", f, "--out", str(tmp_path / "a")])
        main(["wongzakai", "--config", f, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()

    def test_requires_brownian(self, tmp_path):
        assert main(["wongzakai", "--config", write(tmp_path, SMALL)]) == 1


class TestRoughcheck:
    def test_zero_noise_exact(self, tmp_path):
        out = tmp_path / "o"
        cfg = {**SMALL, "params": {"dt": 1 / 64, "T": 0.25}, "noise": {"level": 4}}
        assert main(["roughcheck", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
        s = summary(out)
        assert s["exponent"] == "exact" and s["pass"]

    def test_brownian(self, tmp_path):
        out = tmp_path / "o"
        assert main(["roughcheck", "--config", write(tmp_path, brownian(level=5, seed=1)), "--out", str(out)]) == 0
        s = summary(out)
        assert s["chen_defect"] <= 1e-12
        assert (out / "remainder.csv").exists()

    def test_corrupted_lift(self, tmp_path):
        cfg = brownian(level=5)
        cfg["experiment"] = {"corrupt_lift": True}
        out = tmp_path / "o"
        assert main(["roughcheck", "--config", write(tmp_path, cfg), "--out", str(out)]) == 3
        assert summary(out)["chen_defect"] >= 0.1 - 1e-12


class TestStrat:
    def test_identical_seeds_degenerate(self, tmp_path):
        out = tmp_path / "o"
        cfg = brownian(paths=[0, 0, 0])
        assert main(["strat", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
        s = summary(out)
        assert s["degenerate"]
        assert s["brownian"]["stderr"] == 0.0

    def test_small_ensemble(self, tmp_path):
        out = tmp_path / "o"
        assert main(["strat", "--config", write(tmp_path, brownian(ensemble=6)), "--out", str(out)]) == 0
        assert summary(out)["correction"]["n_paths"] == 6

    def test_workers_match_serial(self, tmp_path, monkeypatch):
        f = write(tmp_path, brownian(ensemble=4))
        main(["strat", "--config", f, "--out", str(tmp_path / "a")])
        monkeypatch.setenv("CNSTN_WORKERS", "2")
        main(["strat", "--config", f, "--out", str(tmp_path / "b")])
        assert summary(tmp_path / "a")["correction"] == summary(tmp_path / "b")["correction"]

    def test_gradient_q_expected_fail(self, tmp_path):
        cfg = brownian(ensemble=3)
        cfg["noise"]["q"] = {"type": "gradient", "modes": [[[1, 0, 0.2, 0.0]]]}
        out = tmp_path / "o"
        f = write(tmp_path, cfg)
        assert main(["strat", "--config", f, "--out", str(out)]) == 1
        main(["strat", "--config", f, "--out", str(out), "--informative"])
        assert summary(out)["energy"]["expected_fail"]

    def test_single_path_rejected(self, tmp_path):
        assert main(["strat", "--config", write(tmp_path, brownian(ensemble=1))]) == 1
