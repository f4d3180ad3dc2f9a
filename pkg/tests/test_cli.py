import json
import os

import pytest

from hslab.cli import main
from hslab.experiments import merge_config, run_experiment


class TestConfigMerge:
    def test_defaults_echoed(self):
        merged = merge_config({"a": 1, "b": 2}, {"b": 5})
        assert merged == {"a": 1, "b": 5}

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError):
            merge_config({"a": 1}, {"zz": 3})


def read(path):
    with open(path) as fh:
        return fh.read()


class TestRunners:
    def test_flow_validate_smoke(self, tmp_path):
        out = tmp_path / "fv"
        cfg = {"cluster_sizes": [4], "cluster_trials": 2, "nbody_n": 256,
               "nbody_eps": 0.01, "nbody_time": 1.0, "min_events": 10,
               "jacobian_trials": 1}
        result = run_experiment("flow-validate", cfg, 1, str(out))
        assert result.passed
        body = read(out / "flow-validate.csv")
        assert body.startswith("check,size,events,metric,limit,passed")
        manifest = json.loads(read(out / "flow-validate.manifest.json"))
        assert manifest["config"]["nbody_n"] == 256
        assert manifest["config"]["horizon"] == 2.0  # default echoed
        assert manifest["passed"] is True

    def test_duality_check_smoke(self, tmp_path):
        cfg = {"cells": 4, "runs": 60, "n_values": [2, 3]}
        result = run_experiment("duality-check", cfg, 2, str(tmp_path / "dc"))
        assert result.passed
        assert len(result.rows) == 4

    def test_hat_probe_smoke(self, tmp_path):
        cfg = {"probes": 40, "restart_probes": 4}
        result = run_experiment("hat-probe", cfg, 3, str(tmp_path / "hp"))
        assert result.passed
        assert result.summary["monotone"] == 0

    def test_jacobian_smoke(self, tmp_path):
        cfg = {"samples_per_k": 4, "ks": [1]}
        result = run_experiment("jacobian-check", cfg, 4, str(tmp_path / "jc"))
        assert result.passed
        assert result.summary["worst"]["1"] <= 1e-4

    def test_singular_scaling_smoke(self, tmp_path):
        cfg = {"pairs": [[2, 1]], "eps_powers": [-4, -5, -6],
               "budget": 4000, "indicator_budget": 400_000,
               "slope_tolerance": 0.25}
        result = run_experiment("singular-scaling", cfg, 5, str(tmp_path / "ss"))
        assert result.passed
        slope = result.summary["slopes"]["2,1"]
        assert abs(slope - 1.0) <= 0.25

    def test_chaos_run_smoke(self, tmp_path):
        cfg = {"n_powers": [7, 9, 11], "times": [0.0], "probes": 1200,
               "dsmc_particles": 2000}
        result = run_experiment("chaos-run", cfg, 6, str(tmp_path / "cr"))
        assert result.passed
        body = read(tmp_path / "cr" / "chaos-run.csv")
        header = body.splitlines()[0]
        assert header.startswith(
            "N,epsilon,ell,s,k,eta,Tprime,R,t,n_depth,seminorm,stderr,flag")

    def test_determinism_byte_identical(self, tmp_path):
        cfg = {"probes": 30, "restart_probes": 2}
        run_experiment("hat-probe", cfg, 7, str(tmp_path / "a"))
        run_experiment("hat-probe", cfg, 7, str(tmp_path / "b"))
        assert read(tmp_path / "a" / "hat-probe.csv") == \
            read(tmp_path / "b" / "hat-probe.csv")

    def test_unknown_subcommand(self, tmp_path):
        with pytest.raises(ValueError):
            run_experiment("nope", {}, 0, str(tmp_path / "x"))

    def test_invalid_grid_key(self, tmp_path):
        with pytest.raises(ValueError):
            run_experiment("hat-probe", {"bogus": 1}, 0, str(tmp_path / "y"))


class TestCliEntry:
    def test_exit_zero_on_pass(self, tmp_path, capsys):
        rc = main(["hat-probe", "--seed", "8",
                   "--out", str(tmp_path / "cli"),
                   "--set", "probes=25", "--set", "restart_probes=2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "hat-probe: PASS" in out

    def test_exit_two_on_bad_config(self, tmp_path, capsys):
        rc = main(["hat-probe", "--out", str(tmp_path / "cli2"),
                   "--set", "bogus=1"])
        assert rc == 2

    def test_config_file(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"probes": 20, "restart_probes": 2}))
        rc = main(["hat-probe", "--config", str(cfg_path),
                   "--out", str(tmp_path / "cli3"), "--seed", "9"])
        assert rc == 0
        manifest = json.loads(read(tmp_path / "cli3" / "hat-probe.manifest.json"))
        assert manifest["config"]["probes"] == 20
