import json

import numpy as np
import pytest

from fspdelab import analysis as an
from fspdelab import simulator as sim
from fspdelab.cli import main
from fspdelab.config import ExperimentConfig
from fspdelab.errors import ConfigError
from fspdelab.experiments import (RUNNERS, fit_order, run_classcheck, run_galerkin,
                                  run_nonexplosion, run_simulate, run_uniqueness)
from fspdelab.segment import SegmentPath, _steps


class TestConfig:
    def test_defaults_validate_for_all_experiments(self):
        for name in RUNNERS:
            cfg = ExperimentConfig.defaults(name)
            assert cfg.experiment == name
            assert len(cfg.hash()) == 64

    def test_grid_step_must_divide_delay(self):
        with pytest.raises(ConfigError, match="time.delay"):
            ExperimentConfig.defaults("simulate", {"time": {"grid_step": 0.3}})

    def test_sample_floor(self):
        with pytest.raises(ConfigError, match="samples"):
            ExperimentConfig.defaults("simulate", {"montecarlo": {"samples": 10}})

    def test_harnack_needs_horizon_beyond_delay(self):
        with pytest.raises(ConfigError, match="horizon"):
            ExperimentConfig.defaults("harnack", {"time": {"horizon": 0.25,
                                                           "delay": 0.25}})

    def test_unknown_experiment_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.defaults("nope")

    def test_file_loading_with_overrides(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"montecarlo": {"seed": 9}}))
        cfg = ExperimentConfig.from_file("simulate", str(path),
                                         {"montecarlo": {"samples": 256}})
        assert cfg.data["montecarlo"]["seed"] == 9
        assert cfg.data["montecarlo"]["samples"] == 256

    def test_malformed_file_is_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file("simulate", str(path))

    def test_hash_changes_with_content(self):
        a = ExperimentConfig.defaults("simulate")
        b = ExperimentConfig.defaults("simulate", {"montecarlo": {"seed": 1}})
        assert a.hash() != b.hash()


class TestClasscheckExperiment:
    def test_all_verdicts_pass(self):
        result = run_classcheck(ExperimentConfig.defaults("classcheck"))
        assert result.passed
        assert result.verdicts["prime_subset_of_full"]


class TestSimulateExperiment:
    def test_trajectory_table_written(self, tmp_path):
        result = run_simulate(ExperimentConfig.defaults("simulate"))
        assert result.passed
        report = result.write(tmp_path)
        assert report.exists()
        csv = tmp_path / "simulate_trajectory.csv"
        header = csv.read_text().splitlines()
        assert header[0].startswith("# experiment=simulate")
        assert any(line.startswith("# seed=") for line in header[:3])


class TestUniquenessExperiment:
    def test_zero_noise_zero_drift_distance_exactly_zero(self):
        cfg = ExperimentConfig.defaults("uniqueness", {
            "coefficients": {"drift": {"kind": "zero"},
                             "delay_drift": {"kind": "zero"},
                             "diffusion": {"kind": "diag", "q": 1e-300}},
            "uniqueness": {"dt_exponents": [6, 7], "reference_exponent": 8,
                           "paths": 8},
        })
        result = run_uniqueness(cfg)
        assert result.metrics["pair_gaps"] == [0.0, 0.0]
        assert result.verdicts["truncation_agreement"]
        assert result.verdicts["order_in_band"]  # degenerate exact regime

    def test_linear_coefficients_distance_roundoff(self):
        cfg = ExperimentConfig.defaults("uniqueness", {
            "coefficients": {"drift": {"kind": "linear", "rate": 1.0},
                             "delay_drift": {"kind": "shift", "beta": 0.3},
                             "diffusion": {"kind": "diag", "q": 0.5}},
            "uniqueness": {"dt_exponents": [6, 7], "reference_exponent": 8,
                           "paths": 8},
        })
        result = run_uniqueness(cfg)
        assert max(result.metrics["pair_gaps"]) <= 1e-12


class TestGalerkinExperiment:
    def test_reference_level_error_exactly_zero(self):
        cfg = ExperimentConfig.defaults("galerkin", {
            "spectrum": {"n_modes": 8},
            "galerkin": {"mode_counts": [2, 4], "reference_modes": 8, "paths": 32},
        })
        result = run_galerkin(cfg)
        assert result.metrics["errors"][-1] == 0.0
        assert result.verdicts["strictly_decreasing"]

    def test_decoupled_linear_error_is_high_mode_energy(self):
        # with zero drifts the modes decouple, so the projection error is
        # exactly the reference's energy above the cut; oracle = per-mode
        # linear simulation of those high modes with the same noise columns
        cfg = ExperimentConfig.defaults("galerkin", {
            "spectrum": {"n_modes": 8},
            "coefficients": {"drift": {"kind": "zero"},
                             "delay_drift": {"kind": "zero"},
                             "diffusion": {"kind": "diag", "q": 0.5}},
            "galerkin": {"mode_counts": [2, 4], "reference_modes": 8, "paths": 64},
        })
        result = run_galerkin(cfg)

        spec = an.Spectrum.power_law(8)
        t = cfg.section("time")
        delay, horizon, dt = t["delay"], t["horizon"], t["grid_step"]
        seed = cfg.section("montecarlo")["seed"]
        from fspdelab.experiments import default_initial_segment

        xi = default_initial_segment(spec, delay, dt)
        steps = _steps(horizon, dt)
        lags = _steps(delay, dt)
        noise = sim.NoisePath.generate(seed, steps, 8, dt, 64)
        coeffs = sim.make_coefficients(8, diag_noise=0.5 * np.ones(8))
        ref = sim.simulate_ensemble(coeffs, xi, horizon, dt, spec, noise)
        for n, err in zip([2, 4], result.metrics["errors"]):
            tail = ref.states[-lags - 1:].copy()
            tail[:, :, :n] = 0.0
            oracle = float(np.mean(np.linalg.norm(tail, axis=-1).max(axis=0) ** 2))
            assert err == pytest.approx(oracle, abs=1e-12)


class TestNonexplosionExperiment:
    def test_linear_dissipative_dominated_by_gronwall_curve(self):
        # comparison pair Phi = K s, h = K s^2 + c matches the analytic
        # alpha * exp(2 K t) envelope of the quadratic comparison argument
        spec = an.Spectrum.power_law(2)
        kappa = 1.0
        coeffs = sim.make_coefficients(2, drift=sim.linear_drift(kappa),
                                       diag_noise=0.3 * np.ones(2))
        K = kappa / 2.0 + 0.25
        lyap = sim.LyapunovSpec(
            comparison=lambda t, s: K * np.asarray(s, dtype=float) + 1e-6,
            forcing=lambda t, s: K * np.asarray(s, dtype=float) ** 2 + 1e-6)
        dt = 1.0 / 128.0
        xi = SegmentPath.constant(np.array([0.8, -0.5]), 0.25, dt)
        result = sim.simulate_ensemble(coeffs, xi, 1.0, dt, spec, n_paths=200,
                                       seed=13, record_convolution=True)
        margins = sim.bihari_margin(lyap, xi, result)
        assert np.min(margins) >= -1e-8
        # direct comparison against the closed Gronwall form per path
        lags = _steps(0.25, dt)
        y = result.states - result.convolution
        running = np.maximum.accumulate(np.linalg.norm(y, axis=-1) ** 2, axis=0)[lags:]
        alpha = sim.bihari_alpha(lyap, xi, result.convolution, 1.0, dt)
        times = dt * np.arange(running.shape[0])
        curve = alpha[None, :] * np.exp(2.0 * K * times[:, None]) \
            * np.exp(2e-6 * times[:, None] / 1.0)  # epsilon shift slack
        assert np.all(running <= curve * (1.0 + 1e-6) + 1e-9)

    def test_zero_coefficients_sup_below_initial(self):
        cfg = ExperimentConfig.defaults("nonexplosion", {
            "coefficients": {"drift": {"kind": "zero"},
                             "delay_drift": {"kind": "zero"},
                             "diffusion": {"kind": "diag", "q": 1e-300}},
            "nonexplosion": {"paths": 100, "negative_control": False},
        })
        result = run_nonexplosion(cfg)
        assert result.verdicts["zero_explosions"]
        assert result.verdicts["comparison_dominates"]

    def test_negative_control_explodes(self):
        cfg = ExperimentConfig.defaults("nonexplosion", {
            "nonexplosion": {"paths": 100, "negative_control": True}})
        result = run_nonexplosion(cfg)
        assert result.metrics["control_exploded"] > 0
        assert result.verdicts["negative_control_explodes"]


class TestHarnackExperiment:
    def test_trivial_drift_campaign_passes(self):
        cfg = ExperimentConfig.defaults("harnack", {
            "coefficients": {"drift": {"kind": "zero"}},
            "zvonkin": {"lambda_grid": [60.0], "time_steps": 6, "nodes_per_dim": 9},
            "harnack": {"train_pairs": 3, "holdout_pairs": 3, "samples": 1000},
        })
        from fspdelab.experiments import run_harnack_campaign

        result = run_harnack_campaign(cfg)
        assert result.passed
        assert result.metrics["threshold_lambda"] == 60.0
        assert result.metrics["bounds"]["K2"] == 0.0  # diffusion untouched


class TestAggregation:
    def test_mismatched_hashes_rejected(self, tmp_path):
        from fspdelab.errors import InputError
        from fspdelab.experiments import aggregate_reports

        a = run_classcheck(ExperimentConfig.defaults("classcheck"))
        b = run_classcheck(ExperimentConfig.defaults(
            "classcheck", {"montecarlo": {"seed": 1}}))
        pa = a.write(tmp_path / "a")
        pb = b.write(tmp_path / "b")
        combined = aggregate_reports([pa])
        assert combined["classcheck"]["config_hash"] == a.config_hash
        with pytest.raises(InputError):
            aggregate_reports([pa, pb])


class TestCli:
    def test_classcheck_exit_zero_and_report(self, tmp_path, capsys):
        code = main(["classcheck", "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert code == 0
        assert "experiment=classcheck" in out
        assert "verdict=pass" in out
        report = json.loads((tmp_path / "classcheck_result.json").read_text())
        assert report["experiment"] == "classcheck"

    def test_config_error_exit_two(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"montecarlo": {"samples": 5}}))
        code = main(["simulate", "--config", str(bad)])
        assert code == 2
        assert "config_error" in capsys.readouterr().out

    def test_runtime_config_error_exit_two(self, tmp_path, capsys):
        # cross-section invariant violated only once the experiment assembles
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"galerkin": {"reference_modes": 8}}))
        code = main(["galerkin", "--config", str(bad), "--out", str(tmp_path)])
        assert code == 2
        assert "config_error" in capsys.readouterr().out

    def test_seed_override_changes_hash(self, tmp_path):
        main(["simulate", "--out", str(tmp_path / "a"), "--seed", "1"])
        main(["simulate", "--out", str(tmp_path / "b"), "--seed", "2"])
        a = (tmp_path / "a" / "simulate_result.json").read_text()
        b = (tmp_path / "b" / "simulate_result.json").read_text()
        assert a != b


def test_fit_order_on_synthetic_power_law():
    dts = [2.0**-e for e in range(4, 9)]
    errs = [3.0 * dt**0.5 for dt in dts]
    assert fit_order(dts, errs) == pytest.approx(0.5, abs=1e-12)
