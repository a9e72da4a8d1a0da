"""
Run Configuration — schema-validated JSON configuration and scenario assembly.

A RunConfig file fully determines a run together with its seed. All
randomness is derived from that seed by counter-based SeedSequence
spawning (see `stream_rng`), so no component ever shares a generator.
"""

import json
import logging
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from navigation.errors import ConfigError
from navigation.ocp import NoiseMode, OcpConfig, TerminalMultiplicity
from navigation.plant import (
    ControlBounds,
    InitialBelief,
    LinearDynamics,
    NoiseModel,
    double_integrator,
)
from navigation.terrain import (
    Bump,
    GaussianFieldMap,
    PlaneMap,
    TerrainMap,
    corridor_field,
    load_grid,
)

logger = logging.getLogger(__name__)

Vec6 = Tuple[float, float, float, float, float, float]
Vec3 = Tuple[float, float, float]
Positive = Annotated[float, Field(gt=0)]
PositiveVec6 = Tuple[Positive, Positive, Positive, Positive, Positive, Positive]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ────────────────────────────────────────────────────────────
# Schema
# ────────────────────────────────────────────────────────────


class BoundsSpec(_Section):
    lower: Vec3
    upper: Vec3


class OcpSpec(_Section):
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1e5, ge=0)
    gamma: float = Field(1e-2, ge=0)
    x_ta: Vec6 = (2000.0, 0.0, 100.0, 0.0, 0.0, 0.0)
    horizon: int = Field(20, ge=1)
    n_s: int = Field(100, ge=1)
    noise_mode: NoiseMode = NoiseMode.ZERO_NOISE
    bounds: Optional[BoundsSpec] = None
    terminal_mask: Vec6 = (1.0, 1.0, 1.0, 0.0, 0.0, 0.0)
    terminal_multiplicity: TerminalMultiplicity = TerminalMultiplicity.ONCE


class NoiseSpec(_Section):
    # Q must be positive definite; run Q = 0 limits as Q = eps I.
    q_diag: PositiveVec6 = (1.0, 1.0, 1.0, 0.01, 0.01, 0.01)
    r: float = Field(4.0, gt=0)


class BeliefSpec(_Section):
    m0: Vec6 = (0.0, 0.0, 100.0, 0.0, 0.0, 0.0)
    p0_diag: PositiveVec6 = (1e4, 1e4, 100.0, 1.0, 1.0, 1.0)


class PlaneTerrain(_Section):
    kind: Literal["plane"] = "plane"
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0


class BumpSpec(_Section):
    center: Tuple[float, float]
    amplitude: float
    width: float = Field(gt=0)


class CorridorSpec(_Section):
    """Bump rows flanking the straight start-to-target line on one side."""

    lateral_offset: float = 300.0
    amplitude: float = 40.0
    width: float = Field(150.0, gt=0)
    pitch: float = Field(250.0, gt=0)


class GaussianFieldTerrain(_Section):
    kind: Literal["gaussian_field"] = "gaussian_field"
    bumps: Optional[List[BumpSpec]] = None
    corridor: Optional[CorridorSpec] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.bumps is None) == (self.corridor is None):
            raise ValueError("gaussian_field needs exactly one of 'bumps' or 'corridor'")
        return self


class GridTerrain(_Section):
    kind: Literal["grid"] = "grid"
    path: str


TerrainSpec = Annotated[Union[PlaneTerrain, GaussianFieldTerrain, GridTerrain], Field(discriminator="kind")]


class RunConfig(_Section):
    """Top-level run configuration (schema version 1), SI units throughout."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    schema_version: Literal[1] = Field(1, alias="schema")
    dt: float = Field(10.0, gt=0)
    n_particles: int = Field(10_000, ge=1)
    runs: int = Field(50, ge=1)
    seed: int = Field(0, ge=0)
    update_at_init: bool = True
    output_dir: str = "results"
    ocp: OcpSpec = Field(default_factory=OcpSpec)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    belief: BeliefSpec = Field(default_factory=BeliefSpec)
    terrain: TerrainSpec = Field(default_factory=lambda: GaussianFieldTerrain(corridor=CorridorSpec()))

    @model_validator(mode="after")
    def _consistent_counts(self):
        if self.ocp.n_s > self.n_particles:
            raise ValueError(f"ocp.n_s ({self.ocp.n_s}) exceeds n_particles ({self.n_particles})")
        return self

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)


def _format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{where}: {item['msg']}")
    return "; ".join(lines)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """
    Parse and validate a RunConfig from JSON text.

    Raises:
        ConfigError: JSON syntax error (with line and column) or schema violation (with field path).
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_format_validation_error(e)}") from e


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = parse_config(text, source=str(path))
    logger.info("Loaded config %s (seed=%d, N=%d)", path, cfg.seed, cfg.n_particles)
    return cfg


def default_config() -> RunConfig:
    """The implementer-calibrated default experiment."""
    return RunConfig()


# ────────────────────────────────────────────────────────────
# Scenario: the numerical objects a config describes
# ────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class Scenario:
    dyn: LinearDynamics
    terrain: TerrainMap
    noise: NoiseModel
    belief: InitialBelief
    n_particles: int
    update_at_init: bool = True


def build_terrain(spec, belief: BeliefSpec, ocp: OcpSpec, base_dir: Optional[Path] = None) -> TerrainMap:
    if isinstance(spec, PlaneTerrain):
        return PlaneMap(a=spec.a, b=spec.b, c=spec.c)
    if isinstance(spec, GaussianFieldTerrain):
        if spec.corridor is not None:
            return corridor_field(
                start=belief.m0[:2],
                target=ocp.x_ta[:2],
                lateral_offset=spec.corridor.lateral_offset,
                amplitude=spec.corridor.amplitude,
                width=spec.corridor.width,
                pitch=spec.corridor.pitch,
            )
        return GaussianFieldMap(
            bumps=tuple(Bump(center=b.center, amplitude=b.amplitude, width=b.width) for b in spec.bumps)
        )
    grid_path = Path(spec.path)
    if base_dir is not None and not grid_path.is_absolute():
        grid_path = base_dir / grid_path
    return load_grid(grid_path)


def build_ocp(cfg: RunConfig) -> OcpConfig:
    """Planner settings of a RunConfig."""
    spec = cfg.ocp
    bounds = None
    if spec.bounds is not None:
        try:
            bounds = ControlBounds(lower=spec.bounds.lower, upper=spec.bounds.upper)
        except ValueError as e:
            raise ConfigError(f"ocp.bounds: {e}") from e
    return OcpConfig(
        alpha=spec.alpha,
        beta=spec.beta,
        gamma=spec.gamma,
        x_ta=np.array(spec.x_ta),
        horizon=spec.horizon,
        n_s=spec.n_s,
        noise_mode=spec.noise_mode,
        bounds=bounds,
        terminal_mask=np.array(spec.terminal_mask),
        terminal_multiplicity=spec.terminal_multiplicity,
    )


def build_scenario(cfg: RunConfig, base_dir: Optional[Path] = None) -> Scenario:
    """Turn a validated RunConfig into dynamics, noise, prior and terrain."""
    return Scenario(
        dyn=double_integrator(cfg.dt),
        terrain=build_terrain(cfg.terrain, cfg.belief, cfg.ocp, base_dir),
        noise=NoiseModel.diagonal(cfg.noise.q_diag, cfg.noise.r),
        belief=InitialBelief.diagonal(cfg.belief.m0, cfg.belief.p0_diag),
        n_particles=cfg.n_particles,
        update_at_init=cfg.update_at_init,
    )


# ────────────────────────────────────────────────────────────
# Seed discipline
# ────────────────────────────────────────────────────────────


class Stream(IntEnum):
    """Disjoint random streams of one episode."""

    TRUTH_INIT = 0
    TRUTH_PROCESS = 1
    TRUTH_OBS = 2
    FILTER = 3
    SOLVER = 4


def stream_rng(seed: int, stream: Stream, step: int = 0) -> np.random.Generator:
    """Generator for (episode seed, stream, step); independent of call order and thread count."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(int(stream), step)))


def run_seed(master_seed: int, run_index: int) -> int:
    """Episode seed of run `run_index` in a campaign; shared by every policy arm."""
    return int(np.random.SeedSequence([master_seed, run_index]).generate_state(1)[0])
