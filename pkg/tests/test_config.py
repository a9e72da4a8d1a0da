import json
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from navigation.errors import ConfigError
from navigation.ocp import NoiseMode, TerminalMultiplicity
from navigation.terrain import GaussianFieldMap, PlaneMap, height_at
from orchestrator.config import (
    RunConfig,
    Stream,
    build_ocp,
    build_scenario,
    default_config,
    load_config,
    parse_config,
    run_seed,
    stream_rng,
)

CONFIGS = Path(__file__).parents[1] / "configs"


def test_shipped_default_matches_built_in():
    assert load_config(CONFIGS / "default.json").model_dump() == default_config().model_dump()


def test_desk_config_reduces_the_particle_count():
    desk = load_config(CONFIGS / "desk.json")
    assert desk.n_particles == 2000
    assert desk.runs == 50
    assert desk.ocp.n_s == 100


def test_json_round_trip(tiny_config_dict):
    cfg = parse_config(json.dumps(tiny_config_dict))
    again = parse_config(cfg.to_json())
    assert again.model_dump() == cfg.model_dump()
    assert again.to_json() == cfg.to_json()
    assert json.loads(cfg.to_json())["schema"] == 1


def test_enums_serialize_as_strings():
    data = json.loads(default_config().to_json())
    assert data["ocp"]["noise_mode"] == "zero_noise"
    assert data["ocp"]["terminal_multiplicity"] == "once"
    cfg = RunConfig.model_validate({"ocp": {"noise_mode": "frozen_samples", "terminal_multiplicity": "per_step"}})
    assert cfg.ocp.noise_mode is NoiseMode.FROZEN_SAMPLES
    assert cfg.ocp.terminal_multiplicity is TerminalMultiplicity.PER_STEP


@pytest.mark.parametrize("patch, fragment", [
    ({"speed": 3}, "speed"),
    ({"ocp": {"alpha": 1.0, "lambda": 2.0}}, "ocp.lambda"),
    ({"schema": 2}, "schema"),
    ({"dt": 0.0}, "dt"),
    ({"noise": {"r": -1.0}}, "noise.r"),
    ({"noise": {"q_diag": [-1.0, 1.0, 1.0, 1.0, 1.0, 1.0]}}, "noise.q_diag.0"),
    ({"noise": {"q_diag": [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]}}, "noise.q_diag.3"),
    ({"belief": {"p0_diag": [1e4, -5.0, 100.0, 1.0, 1.0, 1.0]}}, "belief.p0_diag.1"),
    ({"belief": {"p0_diag": [0.0, 1e4, 100.0, 1.0, 1.0, 1.0]}}, "belief.p0_diag.0"),
    ({"n_particles": 5}, "n_s"),
    ({"terrain": {"kind": "gaussian_field"}}, "exactly one"),
    ({"terrain": {"kind": "lunar"}}, "terrain"),
])
def test_invalid_configs_name_the_field(tiny_config_dict, patch, fragment):
    data = {**tiny_config_dict, **patch}
    with pytest.raises(ConfigError, match=fragment):
        parse_config(json.dumps(data), source="bad.json")


def test_syntax_error_reports_the_line():
    text = '{\n  "schema": 1,\n  "dt": 10.0\n  "seed": 1\n}'
    with pytest.raises(ConfigError, match=r"bad\.json: line 4"):
        parse_config(text, source="bad.json")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_build_scenario_and_ocp(tiny_config_dict):
    cfg = parse_config(json.dumps(tiny_config_dict))
    scenario = build_scenario(cfg)
    ocp = build_ocp(cfg)
    assert isinstance(scenario.terrain, GaussianFieldMap)
    assert scenario.n_particles == 200
    assert scenario.dyn.dt == 10.0
    assert_array_equal(np.diag(scenario.noise.Q), [1.0, 1.0, 1.0, 0.01, 0.01, 0.01])
    assert ocp.horizon == 3
    assert_array_equal(ocp.x_ta, [600.0, 0, 100.0, 0, 0, 0])


def test_default_terrain_is_the_corridor():
    scenario = build_scenario(default_config())
    assert isinstance(scenario.terrain, GaussianFieldMap)
    assert len(scenario.terrain.bumps) > 0
    assert height_at(scenario.terrain, 1000.0, 0.0) < 0.25 * 40.0


def test_plane_terrain_and_bounds():
    cfg = RunConfig.model_validate({
        "terrain": {"kind": "plane", "a": 0.1, "b": 0.0, "c": 5.0},
        "ocp": {"bounds": {"lower": [-1, -1, -0.1], "upper": [1, 1, 0.1]}},
    })
    assert isinstance(build_scenario(cfg).terrain, PlaneMap)
    assert_array_equal(build_ocp(cfg).bounds.upper, [1, 1, 0.1])


def test_inverted_bounds_are_a_config_error():
    cfg = RunConfig.model_validate({"ocp": {"bounds": {"lower": [1, 0, 0], "upper": [0, 0, 0]}}})
    with pytest.raises(ConfigError, match="ocp.bounds"):
        build_ocp(cfg)


def test_grid_path_is_relative_to_the_config(tmp_path):
    grid = tmp_path / "maps" / "valley.csv"
    grid.parent.mkdir()
    grid.write_text("# 0,0,10,4,4\n" + "\n".join(",".join(["1.0"] * 4) for _ in range(4)) + "\n")
    cfg = RunConfig.model_validate({"terrain": {"kind": "grid", "path": "maps/valley.csv"}})
    terrain = build_scenario(cfg, base_dir=tmp_path).terrain
    assert height_at(terrain, 15.0, 10.0) == pytest.approx(1.0)


# ─── Seed discipline ───

def test_stream_generators_are_reproducible():
    a = stream_rng(7, Stream.FILTER).standard_normal(5)
    b = stream_rng(7, Stream.FILTER).standard_normal(5)
    assert_array_equal(a, b)


@pytest.mark.parametrize("other", [
    (8, Stream.FILTER, 0),
    (7, Stream.SOLVER, 0),
    (7, Stream.FILTER, 1),
])
def test_streams_are_distinct(other):
    base = stream_rng(7, Stream.FILTER, 0).standard_normal(5)
    assert not np.array_equal(base, stream_rng(*other).standard_normal(5))


def test_run_seeds():
    seeds = [run_seed(0, i) for i in range(50)]
    assert len(set(seeds)) == 50
    assert seeds == [run_seed(0, i) for i in range(50)]
    assert run_seed(1, 0) != run_seed(0, 0)
