import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from navigation.errors import CampaignFailure, ConfigError, NonPlaneMap
from navigation.plant import InitialBelief, NoiseModel, double_integrator
from navigation.terrain import PlaneMap, corridor_field
from orchestrator import campaign_manager
from orchestrator.campaign_manager import (
    load_campaign_input,
    monte_carlo,
    rmse_from_logs,
)
from orchestrator.config import default_config, load_config, parse_config, run_seed
from orchestrator.graph_orchestrator import EpisodeLog
from orchestrator.validation import (
    CheckResult,
    kalman_oracle,
    null_band,
    run_suite,
    tol_scale,
    validate_crlb,
    validate_fim_forms,
    validate_gradients,
    validate_innovations,
    validate_kf_fisher,
    validate_pf_against_kf,
    whitened_eigmin,
)


@pytest.fixture
def tiny_config(tiny_config_dict):
    return parse_config(json.dumps(tiny_config_dict))


# ─── Kalman oracle ───

def test_scalar_altitude_update():
    sigma2, p33 = 4.0, 100.0
    belief = InitialBelief.diagonal((0.0, 0.0, 100.0, 0, 0, 0), (1e4, 1e4, p33, 1.0, 1.0, 1.0))
    nm = NoiseModel(Q=np.zeros((6, 6)), R=sigma2)
    oracle = kalman_oracle(double_integrator(10.0), PlaneMap(), nm, belief, np.zeros((0, 3)), np.array([103.0]))
    assert oracle.covariances[0, 2, 2] == pytest.approx(p33 * sigma2 / (p33 + sigma2), rel=1e-12)
    assert oracle.covariances[0, 0, 0] == pytest.approx(1e4, rel=1e-12)
    assert oracle.means[0, 2] == pytest.approx(100.0 + p33 / (p33 + sigma2) * 3.0, rel=1e-12)


def test_covariance_does_not_depend_on_observations(dyn, noise, belief, rng):
    plane = PlaneMap(0.05, 0.02, 3.0)
    controls = rng.normal(size=(6, 3))
    a = kalman_oracle(dyn, plane, noise, belief, controls, rng.normal(100.0, 5.0, 7))
    b = kalman_oracle(dyn, plane, noise, belief, controls, rng.normal(100.0, 5.0, 7))
    assert_array_equal(a.covariances, b.covariances)
    assert not np.array_equal(a.means, b.means)


def test_oracle_needs_a_plane(dyn, noise, belief):
    with pytest.raises(NonPlaneMap):
        kalman_oracle(dyn, corridor_field(), noise, belief, np.zeros((2, 3)), np.zeros(3))


def test_oracle_checks_observation_count(dyn, noise, belief):
    with pytest.raises(ValueError):
        kalman_oracle(dyn, PlaneMap(), noise, belief, np.zeros((2, 3)), np.zeros(2))


# ─── kf / fim / grad suites ───

def test_fisher_inverse_matches_kalman_covariance():
    report = validate_kf_fisher(default_config())
    assert report.passed, report.lines()
    assert len(report.checks) == 3


def test_particle_filter_tracks_the_kalman_mean():
    report = validate_pf_against_kf(default_config(), runs=5, presets=("flat", "tilted"))
    assert report.passed, report.lines()


def test_ten_particles_fail_the_bias_check():
    report = validate_pf_against_kf(default_config(), n_particles=10, runs=5, presets=("steep",))
    assert not report.passed


def test_innovations_are_zero_mean():
    report = validate_innovations(default_config(), runs=5, steps=200)
    assert report.passed, report.lines()


def test_fisher_forms_suite():
    report = validate_fim_forms(trials=20)
    assert report.passed, report.lines()
    assert [c.name for c in report.checks] == ["fim.forms_agree", "fim.symmetric", "fim.positive_definite"]


def test_gradient_suite():
    report = validate_gradients(trials=20)
    assert report.passed, report.lines()


def test_report_lists_measured_deviation():
    line = CheckResult("fim.forms_agree", 2.5e-12, 1e-9, True).line()
    assert line == "[PASS] fim.forms_agree: measured=2.500e-12 tolerance=1.000e-09"
    assert CheckResult("x", 1.0, 0.5, False).line().startswith("[FAIL] x")


# ─── Tolerance scaling ───

def test_zero_tolerance_scale_fails_the_suite(monkeypatch):
    monkeypatch.setenv("DUALNAV_TOL_SCALE", "0")
    assert tol_scale() == 0.0
    assert not validate_fim_forms(trials=5).passed


@pytest.mark.parametrize("raw", ["abc", "-1", "nan"])
def test_bad_tolerance_scale(monkeypatch, raw):
    monkeypatch.setenv("DUALNAV_TOL_SCALE", raw)
    with pytest.raises(ConfigError):
        tol_scale()


def test_unknown_suite():
    with pytest.raises(ValueError):
        run_suite("nope")


# ─── CRLB band ───

def test_null_band_shrinks_with_more_runs():
    wide = null_band(50, 6, np.random.default_rng(0), replicates=500)
    narrow = null_band(400, 6, np.random.default_rng(0), replicates=500)
    assert 0 < narrow < wide


def test_whitened_eigmin_of_exact_errors():
    errors = np.vstack([np.eye(3), -np.eye(3)]) * np.sqrt(3.0)
    assert whitened_eigmin(errors, np.eye(3)) == pytest.approx(0.0, abs=1e-12)
    assert whitened_eigmin(2 * errors, np.eye(3)) == pytest.approx(3.0)


@pytest.mark.slow
def test_filter_error_respects_the_information_bound():
    report = validate_crlb(default_config())
    assert report.passed, report.lines()


# ─── RMSE and campaigns ───

def test_single_run_rmse_is_the_absolute_error(tiny_config):
    result = monte_carlo(tiny_config, runs=1)
    for arm, logs in result.logs.items():
        assert_allclose(result.report.rmse[arm], np.abs(logs[0].estimates() - logs[0].truth()), rtol=1e-15)


def test_campaign_pairs_truth_across_arms(tiny_config):
    result = monte_carlo(tiny_config)
    assert result.seeds == [run_seed(tiny_config.seed, i) for i in range(tiny_config.runs)]
    assert result.report.runs == tiny_config.runs
    for fisher, straight in zip(result.logs["fisher"], result.logs["straight"]):
        assert fisher.seed == straight.seed
        assert_array_equal(fisher.truth()[0], straight.truth()[0])
    assert set(result.summary) == {"final_half_rmse_fisher", "final_half_rmse_straight", "fisher_trJ_win_rate"}


def test_parallel_campaign_is_identical(tiny_config):
    serial = monte_carlo(tiny_config, jobs=1)
    parallel = monte_carlo(tiny_config, jobs=2)
    pd.testing.assert_frame_equal(serial.report.to_frame(), parallel.report.to_frame(), check_exact=True)


def test_rmse_recomputed_from_persisted_logs(tmp_path, tiny_config):
    result = monte_carlo(tiny_config, output_dir=tmp_path)
    reloaded = {
        arm: [EpisodeLog.from_csv(tmp_path / "episodes" / f"{arm}_seed{log.seed}.csv", seed=log.seed, arm=arm)
              for log in logs]
        for arm, logs in result.logs.items()
    }
    report = rmse_from_logs(reloaded)
    for arm in result.report.rmse:
        assert_array_equal(report.rmse[arm], result.report.rmse[arm])

    written = pd.read_csv(tmp_path / "rmse.csv", float_precision="round_trip")
    assert list(written.columns) == ["k", "rmse_x1_fisher", "rmse_x2_fisher", "rmse_x1_straight", "rmse_x2_straight"]
    assert_array_equal(written["rmse_x2_fisher"], result.report.rmse["fisher"][:, 1])


def test_manifest_replays_to_identical_rmse(tmp_path, tiny_config):
    result = monte_carlo(tiny_config, output_dir=tmp_path)
    cfg, runs, arms = load_campaign_input(tmp_path / "manifest.json")
    assert cfg.model_dump() == tiny_config.model_dump()
    assert runs == tiny_config.runs
    replay = monte_carlo(cfg, runs=runs, arms=arms)
    pd.testing.assert_frame_equal(result.report.to_frame(), replay.report.to_frame(), check_exact=True)


def test_tampered_manifest_is_rejected(tmp_path, tiny_config):
    monte_carlo(tiny_config, output_dir=tmp_path)
    path = tmp_path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["seeds"][0] += 1
    path.write_text(json.dumps(manifest))
    with pytest.raises(ConfigError):
        load_campaign_input(path)


def test_plain_config_is_a_campaign_input(tiny_config_path, tiny_config):
    cfg, runs, arms = load_campaign_input(tiny_config_path)
    assert cfg.model_dump() == tiny_config.model_dump()
    assert runs is None
    assert tuple(arms) == ("fisher", "straight")


def test_failed_episodes_fail_the_campaign(monkeypatch, tiny_config):
    run_episode = campaign_manager._run_episode

    def flaky(cfg, scenario, arm, run, seed):
        if run == 0 and arm == "straight":
            return {"success": False, "arm": arm, "run": run, "seed": seed, "error": "injected"}
        return run_episode(cfg, scenario, arm, run, seed)

    monkeypatch.setattr(campaign_manager, "_run_episode", flaky)
    with pytest.raises(CampaignFailure):
        monte_carlo(tiny_config)


def _degenerate_in(monkeypatch, bad_run, bad_arm):
    run_episode = campaign_manager._run_episode

    def degenerate(cfg, scenario, arm, run, seed):
        envelope = run_episode(cfg, scenario, arm, run, seed)
        if run == bad_run and arm == bad_arm:
            envelope["log"].degenerate_steps = [2]
        return envelope

    monkeypatch.setattr(campaign_manager, "_run_episode", degenerate)


def test_degenerate_run_is_excluded_from_both_arms(monkeypatch, tiny_config):
    _degenerate_in(monkeypatch, bad_run=3, bad_arm="straight")
    result = monte_carlo(tiny_config, runs=20)
    bad_seed = run_seed(tiny_config.seed, 3)
    assert [entry["run"] for entry in result.excluded] == [3]
    assert result.excluded[0]["seed"] == bad_seed
    assert result.excluded[0]["reasons"] == ["straight: weight degeneracy at steps [2]"]
    assert result.report.runs == 19
    for arm, logs in result.logs.items():
        assert len(logs) == 19
        assert bad_seed not in [log.seed for log in logs]


def test_too_many_degenerate_runs_fail_the_campaign(monkeypatch, tiny_config):
    _degenerate_in(monkeypatch, bad_run=0, bad_arm="fisher")
    with pytest.raises(CampaignFailure):
        monte_carlo(tiny_config, runs=2)


def test_campaign_rejects_bad_arguments(tiny_config):
    with pytest.raises(ValueError):
        monte_carlo(tiny_config, runs=0)
    with pytest.raises(ValueError):
        monte_carlo(tiny_config, arms=("fisher", "zigzag"))


@pytest.mark.slow
def test_desk_campaign_favours_the_fisher_arm():
    result = monte_carlo(load_config(Path(__file__).parents[1] / "configs" / "desk.json"), jobs=-1)
    assert result.summary["final_half_rmse_fisher"] < result.summary["final_half_rmse_straight"]
    assert result.summary["fisher_trJ_win_rate"] >= 0.8
