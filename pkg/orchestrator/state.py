"""
Episode State — Shared state schema for the LangGraph episode driver.

Defines the TypedDict that flows through all nodes of one Fisher feedback
episode, carrying the scenario, the hidden true state, the filter belief
and the per-step records that become the EpisodeLog.
"""

from typing import Any, Callable, Dict, List, Optional, Tuple, TypedDict

import numpy as np

from navigation.ocp import OcpConfig, SolveResult
from navigation.particle_filter import ParticleSet

# hook(l, xi_l, eta_{l+1}) -> (xi_l, eta_{l+1}); sees the truth noise drawn after u_l is applied
TruthNoiseHook = Callable[[int, np.ndarray, float], Tuple[np.ndarray, float]]


class EpisodeState(TypedDict, total=False):
    """Shared state for one closed-loop Fisher feedback episode."""

    # ─── Inputs ───
    cfg: OcpConfig
    scenario: Any                   # orchestrator.config.Scenario
    seed: int
    arm: str                        # "fisher" | "straight"
    truth_noise_hook: Optional[TruthNoiseHook]
    dump_particles: bool

    # ─── True Plant (never read by plan) ───
    truth: np.ndarray
    z: float
    pending_eta: float

    # ─── Belief ───
    l: int
    filter_rng: np.random.Generator
    particles: ParticleSet          # resampled set, continues the filter chain
    posterior: ParticleSet          # weighted posterior, source of estimates and plans
    J: np.ndarray
    planned_controls: Optional[np.ndarray]
    u: np.ndarray

    # ─── Records ───
    rows: List[Dict[str, float]]
    snapshots: List[ParticleSet]
    solves: List[Tuple[int, SolveResult]]
    degenerate_steps: List[int]
    line_search_failures: int
    off_map_solves: int

    # ─── Orchestration Metadata ───
    current_step: str
    status: str                     # "running" | "complete"
    log: Any                        # orchestrator.graph_orchestrator.EpisodeLog
