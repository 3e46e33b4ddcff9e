import json

import numpy as np
import pytest

from cnstn.config import ConfigError, build_problem, parse_config, resolved_dict
from cnstn.io import (
    SchemaError,
    blob_hash,
    canonical_json,
    check_schema_line,
    read_checkpoint,
    read_table,
    write_checkpoint,
    write_table,
)
from cnstn.noise import sample_brownian


class TestSchema:
    def test_minor_version_accepted(self):
        check_schema_line("# schema: ledger/1.3", "ledger/1.0")

    def test_major_version_rejected(self):
        with pytest.raises(SchemaError):
            check_schema_line("# schema: ledger/2.0", "ledger/1.0")

    def test_name_mismatch(self):
        with pytest.raises(SchemaError):
            check_schema_line("# schema: driver/1.0", "ledger/1.0")

    def test_missing(self):
        with pytest.raises(SchemaError):
            check_schema_line("t,x", "ledger/1.0")

    def test_table_round_trip(self, tmp_path):
        f = tmp_path / "t.csv"
        write_table(f, "demo/1.0", ["a", "b"], [[0.1, 2.0], [1 / 3, -4.5]])
        cols, data = read_table(f, "demo/1.0")
        assert cols == ["a", "b"]
        assert data[1, 0] == 1 / 3


class TestHashing:
    def test_git_blob_hash(self):
        # `git hash-object` of "hello\n"
        assert blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"

    def test_canonical_json_order(self):
        assert canonical_json({"b": 1, "a": [1, 2]}) == canonical_json({"a": [1, 2], "b": 1})


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        arrays = {"r": rng.standard_normal((3, 4)), "c": rng.standard_normal((2, 2)) + 1j}
        write_checkpoint(tmp_path / "ck", {"note": "x"}, arrays)
        header, back = read_checkpoint(tmp_path / "ck")
        assert header["note"] == "x"
        assert np.array_equal(back["r"], arrays["r"])
        assert np.array_equal(back["c"], arrays["c"])

    def test_interleaved_layout(self, tmp_path):
        write_checkpoint(tmp_path / "ck", {}, {"c": np.array([1 + 2j, 3 - 4j])})
        raw = np.frombuffer((tmp_path / "ck.bin").read_bytes(), dtype="<f8")
        assert raw.tolist() == [1.0, 2.0, 3.0, -4.0]

    def test_tamper_detected(self, tmp_path):
        write_checkpoint(tmp_path / "ck", {}, {"a": np.arange(4.0)})
        data = bytearray((tmp_path / "ck.bin").read_bytes())
        data[0] ^= 1
        (tmp_path / "ck.bin").write_bytes(bytes(data))
        with pytest.raises(SchemaError):
            read_checkpoint(tmp_path / "ck")


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config("{}")
        assert cfg.params.dt == 1e-3
        assert cfg.noise.p == 2.5
        prob = build_problem(cfg)
        assert prob.params.density_floor is None
        assert prob.state0.rho.mean() == pytest.approx(1.0)

    def test_gamma_rule(self):
        with pytest.raises(ConfigError, match="gamma must exceed N/2"):
            parse_config(json.dumps({"params": {"gamma": 0.5}}))

    def test_beta_rule(self):
        with pytest.raises(ConfigError, match=r"beta must exceed max\{4, gamma\}"):
            parse_config(json.dumps({"params": {"beta": 3.0, "gamma": 2.0}}))

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config(json.dumps({"grid": {"points": 32}}))

    def test_invalid_json(self):
        with pytest.raises(ConfigError):
            parse_config("{not json")

    def test_dt_must_divide_T(self):
        with pytest.raises(ConfigError):
            parse_config(json.dumps({"params": {"dt": 0.3, "T": 0.5}}))

    def test_gradient_q_needs_informative(self):
        text = json.dumps({"noise": {"kind": "smooth", "q": {"type": "gradient", "modes": [[[1, 0, 1, 0]]]},
                                     "drivers": [{"drift": 1.0}]}})
        with pytest.raises(ConfigError, match="informative"):
            parse_config(text)
        assert parse_config(text, informative=True).informative

    def test_brownian_smooth_q_rejected(self):
        text = json.dumps({"noise": {"kind": "brownian", "q": {"type": "streamfunction", "modes": [[[1, 0, 1, 0]]]}}})
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_resolved_round_trip(self):
        cfg = parse_config(json.dumps({"grid": {"m": 4, "n": 16}}))
        again = parse_config(json.dumps(resolved_dict(cfg)))
        assert resolved_dict(again) == resolved_dict(cfg)


class TestBuildProblem:
    def base(self, **noise):
        return {"grid": {"dim": 2, "m": 4, "n": 16}, "params": {"dt": 0.01, "T": 0.64},
                "noise": {"kind": "brownian", "q": {"type": "constant", "vectors": [[1, 0]]}, **noise}}

    def test_seed_and_index(self):
        cfg = parse_config(json.dumps(self.base(seed=3)))
        a = build_problem(cfg, index=0).driver
        b = build_problem(cfg, index=1).driver
        assert not np.array_equal(a.values, b.values)
        assert np.array_equal(a.values, build_problem(cfg, index=0).driver.values)

    def test_level(self):
        cfg = parse_config(json.dumps(self.base(level=3)))
        prob = build_problem(cfg)
        assert len(prob.driver.times) == 9
        assert len(prob.brownian.times) == 65

    def test_level_divisibility(self):
        cfg = parse_config(json.dumps(self.base(level=7)))
        with pytest.raises(ConfigError):
            build_problem(cfg)

    def test_path_csv(self, tmp_path):
        path = sample_brownian(1, 0.64, 64, seed=9)
        path.to_csv(tmp_path / "w.csv")
        cfg = parse_config(json.dumps(self.base(path_csv=str(tmp_path / "w.csv"))))
        assert np.allclose(build_problem(cfg).driver.values, path.values)

    def test_initial_regularized(self):
        cfg = parse_config(json.dumps({"grid": {"m": 4, "n": 16},
                                       "initial": {"rho_modes": [[1, 0, 2.0, 0.0]]}}))
        rho = build_problem(cfg).state0.rho
        assert np.min(rho.values) > 0
        assert rho.mean() == pytest.approx(1.0)

    def test_bad_mode_row(self):
        cfg = parse_config(json.dumps({"grid": {"m": 4, "n": 16}, "initial": {"rho_modes": [[1, 0.5, 0]]}}))
        with pytest.raises(ConfigError):
            build_problem(cfg)
