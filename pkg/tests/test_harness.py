"""Config validation, experiment runs, trace output, and the CLI."""

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from apmcmc.cli import run_cli
from apmcmc.harness import (
    diagnose_traces,
    ising_observation,
    read_trace_csv,
    run_experiment,
    validate_config,
    validate_config_dict,
)


def minimal_toy(**overrides):
    config = {
        "experiment": "toy",
        "kernel": "apm-mi+mh",
        "seed": 7,
        "n_iters": 60,
        "thin": 5,
        "burn_in": 10,
        "n_chains": 2,
    }
    config.update(overrides)
    return config


class TestValidation:
    def test_minimal_config_passes(self):
        resolved, errors = validate_config_dict(minimal_toy())
        assert errors == []
        assert resolved["model"]["dim"] == 5
        assert resolved["slice"]["w"] == 4.0
        assert resolved["theta_slice_mode"] == "random"

    def test_all_violations_collected(self):
        config = minimal_toy(
            kernel="apm-ss", n_iters=-5, bogus_key=1,
            theta_slice_mode="sideways",
        )
        _, errors = validate_config_dict(config)
        text = "\n".join(errors)
        assert len(errors) == 4
        assert "apm-(mi|ss)+(mh|ss)" in text
        assert "n_iters" in text
        assert "bogus_key" in text
        assert "theta_slice_mode" in text

    def test_unknown_nested_keys_rejected(self):
        _, errors = validate_config_dict(
            minimal_toy(model={"dim": 5, "voltage": 3},
                        proposal={"sigma": 0.5, "mass": 1.0})
        )
        text = "\n".join(errors)
        assert "model.voltage" in text
        assert "proposal.mass" in text

    def test_adaptation_must_fit_burn_in(self):
        _, errors = validate_config_dict(
            minimal_toy(burn_in=10, adaptation={"adapt_iters": 50})
        )
        assert any("adapt_iters" in e and "burn_in" in e for e in errors)

    def test_sweep_kernel_needs_a_step_size(self):
        config = {
            "experiment": "toy-stepsize-sweep",
            "seed": 1,
            "n_iters": 100,
            "sweep": {"sigmas": [0.5], "kernels": ["noisy-ss"]},
        }
        _, errors = validate_config_dict(config)
        assert any("no step size" in e for e in errors)

    def test_sweep_section_only_for_sweep_experiment(self):
        _, errors = validate_config_dict(
            minimal_toy(sweep={"sigmas": [0.5], "kernels": ["pm-mh"]})
        )
        assert any("toy-stepsize-sweep" in e for e in errors)

    def test_gp_dataset_path_must_exist(self):
        config = {
            "experiment": "gp", "kernel": "pm-mh", "seed": 1,
            "n_iters": 100, "model": {"path": "/no/such/file.csv"},
        }
        _, errors = validate_config_dict(config)
        assert any("no such file" in e for e in errors)

    def test_ising_theta_true_inside_box(self):
        config = {
            "experiment": "ising", "kernel": "pm-mh", "seed": 1,
            "n_iters": 100, "model": {"theta_true": [0.7, 0.0]},
        }
        _, errors = validate_config_dict(config)
        assert any("prior box" in e for e in errors)

    def test_file_validation_reports_parse_location(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"experiment": "toy",\n  "seed": }')
        _, errors = validate_config(str(bad))
        assert len(errors) == 1
        assert "bad.json:2:" in errors[0]

    def test_missing_file(self):
        _, errors = validate_config("/no/such/config.json")
        assert len(errors) == 1


class TestToyRuns:
    def test_outputs_and_row_counts(self, tmp_path):
        out = tmp_path / "out"
        result = run_experiment(minimal_toy(), out)
        assert result["ok"]
        for i in range(2):
            trace = read_trace_csv(out / f"chain_{i:02d}.csv")
            # floor((60 - 10) / 5) rows per chain
            assert trace["theta"].shape == (10, 5)
            assert trace["iter"][0] == 15 and trace["iter"][-1] == 60
            assert np.all(np.diff(trace["cum_estimator_evals"]) > 0)
        resolved = json.loads((out / "config.json").read_text())
        assert resolved["model"] == {"dim": 5}
        summary = json.loads((out / "summary.json").read_text())
        assert summary["kernel"] == "apm-mi+mh"
        assert len(summary["parameters"]) == 5
        assert "u" in summary["acceptance_rate"]
        assert (out / "hist_theta_0.csv").exists()
        assert (out / "autocorr_theta_0.csv").exists()
        assert not (out / "errors.json").exists()

    def test_reruns_byte_identical(self, tmp_path):
        config = minimal_toy(n_iters=200, thin=7, burn_in=30)
        run_experiment(config, tmp_path / "a")
        run_experiment(config, tmp_path / "b")
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            a = (tmp_path / "a" / name).read_bytes()
            b = (tmp_path / "b" / name).read_bytes()
            assert a == b, f"{name} differs between reruns"

    def test_trace_floats_round_trip(self, tmp_path):
        out = tmp_path / "out"
        run_experiment(minimal_toy(n_chains=1), out)
        trace = read_trace_csv(out / "chain_00.csv")
        with open(out / "chain_00.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        for row, lf in zip(rows, trace["log_f_hat"]):
            assert float(row[6]) == lf  # repr round-trips exactly

    def test_noisy_ss_kernel_runs(self, tmp_path):
        config = minimal_toy(
            kernel="noisy-ss", n_iters=30, thin=1, burn_in=0, n_chains=1,
            slice={"w": 4.0, "max_shrink": 400, "collapse_width": 1e-15},
        )
        result = run_experiment(config, tmp_path / "out")
        assert result["ok"]
        trace = read_trace_csv(tmp_path / "out" / "chain_00.csv")
        assert trace["theta"].shape == (30, 5)

    def test_invalid_config_raises(self, tmp_path):
        with pytest.raises(ValueError, match="invalid config"):
            run_experiment(minimal_toy(kernel="warp"), tmp_path / "out")


class TestSweepRuns:
    def test_one_curve_per_kernel(self, tmp_path):
        config = {
            "experiment": "toy-stepsize-sweep",
            "seed": 11,
            "n_iters": 400,
            "burn_in": 50,
            "sweep": {
                "sigmas": [0.2, 0.8],
                "kernels": ["pm-mh", "apm-mi+mh"],
            },
        }
        out = tmp_path / "sweep"
        result = run_experiment(config, out)
        assert result["ok"]
        for kernel in ("pm-mh", "apm-mi+mh"):
            path = out / f"acceptance_curve_{kernel}.csv"
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
            assert rows[0] == ["sigma", "acceptance_rate"]
            assert [float(r[0]) for r in rows[1:]] == [0.2, 0.8]
            for r in rows[1:]:
                assert 0.0 <= float(r[1]) <= 1.0
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["curves"]) == {"pm-mh", "apm-mi+mh"}


class TestIsingRuns:
    def test_observation_is_deterministic(self):
        model = {
            "width": 3, "height": 3, "theta_true": [0.3, 0.0],
            "data_seed": 7, "j_max": 0.4, "h_max": 1.0, "max_depth": 1 << 20,
        }
        a = ising_observation(model)
        b = ising_observation(model)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (3, 3)
        assert set(np.unique(a)) <= {-1, 1}

    def test_small_run_with_u_flags(self, tmp_path):
        config = {
            "experiment": "ising",
            "kernel": "apm-ss+ss",
            "seed": 21,
            "n_iters": 80,
            "thin": 2,
            "burn_in": 20,
            "model": {"width": 3, "height": 3},
        }
        out = tmp_path / "ising"
        result = run_experiment(config, out)
        assert result["ok"]
        trace = read_trace_csv(out / "chain_00.csv")
        assert trace["param_names"] == ["theta_J", "theta_h"]
        assert trace["theta"].shape == (30, 2)
        assert all(f is not None for f in trace["accepted_u"])
        assert all(f is not None for f in trace["accepted_theta"])
        # posterior samples stay inside the prior box
        assert np.all(trace["theta"][:, 0] >= 0.0)
        assert np.all(trace["theta"][:, 0] <= 0.4)
        assert np.all(np.abs(trace["theta"][:, 1]) <= 1.0)

    def test_ais_estimator_selected(self, tmp_path):
        config = {
            "experiment": "ising",
            "kernel": "pm-mh",
            "seed": 22,
            "n_iters": 40,
            "burn_in": 0,
            "ais_k": 2,
            "model": {"width": 3, "height": 3},
        }
        result = run_experiment(config, tmp_path / "out")
        assert result["ok"]

    def test_runtime_failure_writes_manifest(self, tmp_path):
        # a depth cap of 1 sweep cannot coalesce at this coupling
        config = {
            "experiment": "ising",
            "kernel": "pm-mh",
            "seed": 23,
            "n_iters": 40,
            "model": {"width": 4, "height": 4, "max_depth": 1,
                      "theta_true": [0.35, 0.2]},
        }
        out = tmp_path / "broken"
        result = run_experiment(config, out)
        assert not result["ok"]
        manifest = json.loads((out / "errors.json").read_text())
        assert manifest[0]["chain"] == 0
        assert "CoalescenceError" in manifest[0]["error"]
        assert (out / "config.json").exists()  # partial outputs kept


class TestGpRuns:
    def test_small_synthetic_run(self, tmp_path):
        config = {
            "experiment": "gp",
            "kernel": "apm-ss+mh",
            "seed": 31,
            "n_iters": 60,
            "thin": 3,
            "burn_in": 12,
            "model": {"n": 12, "d": 2, "n_importance": 4},
            "adaptation": {"adapt_iters": 10, "window": 5},
        }
        out = tmp_path / "gp"
        result = run_experiment(config, out)
        assert result["ok"]
        trace = read_trace_csv(out / "chain_00.csv")
        assert trace["param_names"] == ["sigma", "tau"]
        assert trace["theta"].shape == (16, 2)
        assert np.all(trace["theta"] > 0.0)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["final_sigma"][0] is not None

    def test_csv_dataset_round_trip(self, tmp_path):
        data = tmp_path / "points.csv"
        rng = np.random.default_rng(5)
        with open(data, "w") as fh:
            fh.write("x0,x1,label\n")
            for _ in range(10):
                x = rng.standard_normal(2)
                fh.write(f"{x[0]},{x[1]},{rng.choice([-1, 1])}\n")
        config = {
            "experiment": "gp",
            "kernel": "pm-mh",
            "seed": 32,
            "n_iters": 30,
            "model": {"path": str(data), "n_importance": 4},
        }
        result = run_experiment(config, tmp_path / "out")
        assert result["ok"]


class TestDiagnose:
    def test_recomputes_summary(self, tmp_path):
        out = tmp_path / "out"
        config = minimal_toy(n_iters=3000, thin=5, burn_in=500)
        run_experiment(config, out)
        original = json.loads((out / "summary.json").read_text())
        (out / "summary.json").unlink()
        recomputed = diagnose_traces(out)
        assert (out / "summary.json").exists()
        for orig_p, new_p in zip(
            original["parameters"], recomputed["parameters"]
        ):
            assert orig_p["name"] == new_p["name"]
            assert new_p["ess"] == pytest.approx(orig_p["ess"], rel=1e-12)
            assert new_p["r_hat"] == pytest.approx(orig_p["r_hat"], rel=1e-12)
        assert recomputed["acceptance_rate"] == original["acceptance_rate"]

    def test_missing_dir_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            diagnose_traces(tmp_path / "nothing")


class TestCli:
    def write_config(self, tmp_path, config):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        return str(path)

    def test_validate_ok_and_exit_codes(self, tmp_path, capsys):
        path = self.write_config(tmp_path, minimal_toy())
        assert run_cli(["validate", path]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["experiment"] == "toy"

    def test_validate_bad_config_exits_one(self, tmp_path, capsys):
        path = self.write_config(tmp_path, minimal_toy(kernel="nope"))
        assert run_cli(["validate", path]) == 1
        assert "grammar" in capsys.readouterr().err

    def test_run_writes_outputs(self, tmp_path, capsys):
        path = self.write_config(tmp_path, minimal_toy(n_chains=1))
        out = tmp_path / "out"
        assert run_cli(["run", path, "--out", str(out)]) == 0
        assert (out / "chain_00.csv").exists()
        assert capsys.readouterr().out.strip() == str(out)

    def test_run_override_chains(self, tmp_path):
        path = self.write_config(tmp_path, minimal_toy(n_chains=1))
        out = tmp_path / "out"
        assert run_cli(
            ["run", path, "--out", str(out), "--chains", "2", "--seed", "99"]
        ) == 0
        assert (out / "chain_01.csv").exists()
        resolved = json.loads((out / "config.json").read_text())
        assert resolved["seed"] == 99 and resolved["n_chains"] == 2

    def test_run_bad_config_exits_one(self, tmp_path):
        path = self.write_config(tmp_path, minimal_toy(n_iters=0))
        assert run_cli(["run", path, "--out", str(tmp_path / "o")]) == 1

    def test_run_runtime_error_exits_two(self, tmp_path, capsys):
        config = {
            "experiment": "ising", "kernel": "pm-mh", "seed": 1,
            "n_iters": 20,
            "model": {"width": 4, "height": 4, "max_depth": 1,
                      "theta_true": [0.35, 0.2]},
        }
        path = self.write_config(tmp_path, config)
        out = tmp_path / "out"
        assert run_cli(["run", path, "--out", str(out)]) == 2
        assert "partial outputs" in capsys.readouterr().err
        assert (out / "errors.json").exists()

    def test_diagnose_cli(self, tmp_path, capsys):
        path = self.write_config(tmp_path, minimal_toy(n_chains=1))
        out = tmp_path / "out"
        run_cli(["run", path, "--out", str(out)])
        capsys.readouterr()
        assert run_cli(["diagnose", str(out)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["n_chains"] == 1

    def test_diagnose_missing_dir_exits_two(self, tmp_path, capsys):
        assert run_cli(["diagnose", str(tmp_path / "void")]) == 2
        assert "runtime error" in capsys.readouterr().err

    def test_out_dir_env_override(self, tmp_path, capsys, monkeypatch):
        path = self.write_config(tmp_path, minimal_toy(n_chains=1))
        monkeypatch.setenv("APMCMC_OUT_DIR", str(tmp_path / "base"))
        monkeypatch.chdir(tmp_path)
        assert run_cli(["run", path]) == 0
        assert (tmp_path / "base" / "config" / "chain_00.csv").exists()


class TestBundledConfigs:
    def test_all_bundled_configs_validate(self):
        config_dir = Path(__file__).resolve().parent.parent / "configs"
        paths = sorted(config_dir.glob("*.json"))
        assert len(paths) >= 8
        for path in paths:
            resolved, errors = validate_config(str(path))
            assert errors == [], f"{path.name}: {errors}"
            assert resolved["experiment"] in (
                "toy", "toy-stepsize-sweep", "ising", "gp"
            )
