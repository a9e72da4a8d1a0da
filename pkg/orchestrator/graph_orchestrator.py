"""
Graph Orchestrator — LangGraph driver for Fisher feedback control episodes.

Runs the Fisher feedback loop as a StateGraph whose nodes are the steps of one
closed-loop iteration:

    initialize → plan → actuate → propagate → sense → reweight → resample → inform
                   ↑                                                          │
                   └──────────────────── l < T ───────────────────────────────┘
                                                                  l = T → compile_results → END

The plan node only ever sees the filter belief; the true state lives in the
graph state for the plant nodes (actuate, sense) and for logging.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from langgraph.graph import END, StateGraph
from numpy.typing import NDArray

from navigation import particle_filter as pf
from navigation.errors import DegenerateWeights, NavigationError
from navigation.fisher import fim_init, fim_step
from navigation.ocp import OcpConfig, SolveResult, shift_warm_start, solve
from navigation.plant import (
    STATE_DIM,
    STATE_LABELS,
    observe,
    sample_obs_noise,
    sample_process_noise,
    step,
    symmetric_factor,
)
from orchestrator.config import Scenario, Stream, stream_rng
from orchestrator.state import EpisodeState, TruthNoiseHook

logger = logging.getLogger(__name__)

ESTIMATE_LABELS = ("e1", "e2", "e3", "ev1", "ev2", "ev3")
CONTROL_LABELS = ("u1", "u2", "u3")
EPISODE_COLUMNS = ["k", *STATE_LABELS, *ESTIMATE_LABELS, *CONTROL_LABELS, "z", "trJ", "ess", "iters"]


# ────────────────────────────────────────────────────────────
# Episode log
# ────────────────────────────────────────────────────────────


@dataclass
class EpisodeLog:
    """Per-step truth, estimate, applied control, observation and FIM trace of one episode."""

    frame: pd.DataFrame
    seed: int = -1
    arm: str = "fisher"
    final_distance: float = float("nan")
    degenerate_steps: List[int] = field(default_factory=list)
    line_search_failures: int = 0
    off_map_solves: int = 0
    snapshots: List[pf.ParticleSet] = field(default_factory=list)
    solves: List[Tuple[int, SolveResult]] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return bool(self.degenerate_steps)

    @property
    def steps(self) -> NDArray:
        return self.frame["k"].to_numpy()

    def truth(self) -> NDArray:
        return self.frame[list(STATE_LABELS)].to_numpy()

    def estimates(self) -> NDArray:
        return self.frame[list(ESTIMATE_LABELS)].to_numpy()

    def controls(self) -> NDArray:
        """Applied controls u_0 .. u_{T-1} (the last row carries none)."""
        return self.frame[list(CONTROL_LABELS)].to_numpy()[:-1]

    def trace_J(self) -> NDArray:
        return self.frame["trJ"].to_numpy()

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False, float_format="%.17g")
        logger.info("Wrote episode log to %s", path)
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path], x_ta: Optional[NDArray] = None, **kwargs) -> "EpisodeLog":
        frame = pd.read_csv(path, float_precision="round_trip")
        missing = [c for c in EPISODE_COLUMNS if c not in frame.columns]
        if missing:
            raise ValueError(f"{path}: episode log lacks columns {missing}")
        log = cls(frame=frame[EPISODE_COLUMNS], **kwargs)
        if x_ta is not None:
            log.final_distance = _final_distance(log.truth()[-1], x_ta)
        return log


def _final_distance(x_final: NDArray, x_ta: NDArray) -> float:
    return float(np.linalg.norm(x_final[:3] - np.asarray(x_ta)[:3]))


def _row(k: int, truth: NDArray, posterior: pf.ParticleSet, z: float, J: NDArray) -> Dict[str, float]:
    row: Dict[str, float] = {"k": k}
    row.update(zip(STATE_LABELS, map(float, truth)))
    row.update(zip(ESTIMATE_LABELS, map(float, pf.mean(posterior))))
    row.update({label: float("nan") for label in CONTROL_LABELS})
    row.update({"z": float(z), "trJ": float(np.trace(J)), "ess": pf.ess(posterior), "iters": float("nan")})
    return row


def _reweight(pset: pf.ParticleSet, z: float, scenario: Scenario) -> Tuple[pf.ParticleSet, bool]:
    """Weight update with the uniform fallback on degeneracy; returns (set, ok)."""
    try:
        return pf.update(pset, z, scenario.terrain, scenario.noise), True
    except DegenerateWeights as e:
        logger.warning("Weight degeneracy at step %d, falling back to uniform weights: %s", pset.k, e)
        return replace(pset, weights=pf.uniform_weights(pset.size)), False


# ────────────────────────────────────────────────────────────
# Graph Nodes: each function takes EpisodeState, returns a partial update
# ────────────────────────────────────────────────────────────


def initialize(state: EpisodeState) -> Dict[str, Any]:
    """Draw the hidden initial state, create the particles and take Z_0 into account."""
    scenario: Scenario = state["scenario"]
    seed = state["seed"]

    L0 = symmetric_factor(scenario.belief.P0)
    truth = scenario.belief.m0 + L0 @ stream_rng(seed, Stream.TRUTH_INIT).standard_normal(STATE_DIM)
    eta0 = sample_obs_noise(scenario.noise, stream_rng(seed, Stream.TRUTH_OBS, 0))
    z0 = float(observe(truth, scenario.terrain, eta0, clamp=True))

    filter_rng = stream_rng(seed, Stream.FILTER)
    posterior = pf.init(scenario.belief, scenario.n_particles, filter_rng)
    degenerate: List[int] = []
    if scenario.update_at_init:
        posterior, ok = _reweight(posterior, z0, scenario)
        if not ok:
            degenerate.append(0)

    J = fim_init(
        scenario.belief, posterior.particles, posterior.weights, scenario.terrain, scenario.noise,
        update_at_init=scenario.update_at_init,
    )

    return {
        "truth": truth,
        "z": z0,
        "l": 0,
        "filter_rng": filter_rng,
        "posterior": posterior,
        "particles": pf.resample_systematic(posterior, filter_rng),
        "J": J,
        "planned_controls": None,
        "rows": [_row(0, truth, posterior, z0, J)],
        "snapshots": [posterior] if state.get("dump_particles") else [],
        "solves": [],
        "degenerate_steps": degenerate,
        "line_search_failures": 0,
        "off_map_solves": 0,
        "current_step": "initialize",
        "status": "running",
    }


def plan(state: EpisodeState) -> Dict[str, Any]:
    """Solve the multi-particle problem from the Ns most likely particles, warm-started."""
    cfg: OcpConfig = state["cfg"]
    scenario: Scenario = state["scenario"]
    l = state["l"]

    planning_set = pf.top_k(state["posterior"], cfg.n_s)
    previous = state.get("planned_controls")
    warm = None if previous is None else shift_warm_start(previous, cfg.horizon - l)
    result = solve(
        planning_set, warm, scenario.dyn, scenario.terrain, scenario.noise, cfg, state["J"],
        rng=stream_rng(state["seed"], Stream.SOLVER, l),
    )

    solves = list(state.get("solves", []))
    solves.append((l, result))
    return {
        "planned_controls": result.controls,
        "solves": solves,
        "line_search_failures": state.get("line_search_failures", 0) + int(result.line_search_failed),
        "off_map_solves": state.get("off_map_solves", 0) + int(result.off_map),
        "current_step": "plan",
    }


def actuate(state: EpisodeState) -> Dict[str, Any]:
    """Apply the first planned control to the true plant with fresh process noise."""
    scenario: Scenario = state["scenario"]
    seed, l = state["seed"], state["l"]
    u = np.array(state["planned_controls"][0], dtype=float)

    xi = sample_process_noise(scenario.noise, stream_rng(seed, Stream.TRUTH_PROCESS, l))
    eta = sample_obs_noise(scenario.noise, stream_rng(seed, Stream.TRUTH_OBS, l + 1))
    hook: Optional[TruthNoiseHook] = state.get("truth_noise_hook")
    if hook is not None:
        xi, eta = hook(l, xi, eta)

    rows = list(state["rows"])
    row = dict(rows[-1])
    row.update(zip(CONTROL_LABELS, map(float, u)))
    row["iters"] = float(state["solves"][-1][1].iterations)
    rows[-1] = row

    return {
        "u": u,
        "truth": step(scenario.dyn, state["truth"], u, xi),
        "pending_eta": float(eta),
        "rows": rows,
        "current_step": "actuate",
    }


def propagate(state: EpisodeState) -> Dict[str, Any]:
    scenario: Scenario = state["scenario"]
    particles = pf.predict(state["particles"], scenario.dyn, state["u"], scenario.noise, state["filter_rng"])
    return {"particles": particles, "current_step": "propagate"}


def sense(state: EpisodeState) -> Dict[str, Any]:
    """Height measurement of the true plant."""
    scenario: Scenario = state["scenario"]
    z = float(observe(state["truth"], scenario.terrain, state["pending_eta"], clamp=True))
    return {"z": z, "current_step": "sense"}


def reweight(state: EpisodeState) -> Dict[str, Any]:
    posterior, ok = _reweight(state["particles"], state["z"], state["scenario"])
    degenerate = list(state.get("degenerate_steps", []))
    if not ok:
        degenerate.append(posterior.k)
    return {"posterior": posterior, "degenerate_steps": degenerate, "current_step": "reweight"}


def resample(state: EpisodeState) -> Dict[str, Any]:
    particles = pf.resample_systematic(state["posterior"], state["filter_rng"])
    return {"particles": particles, "current_step": "resample"}


def inform(state: EpisodeState) -> Dict[str, Any]:
    """Advance the Fisher information on the posterior particles and log step l+1."""
    scenario: Scenario = state["scenario"]
    posterior = state["posterior"]
    J = fim_step(
        state["J"], scenario.dyn, scenario.noise, posterior.particles, posterior.weights, scenario.terrain
    )

    rows = list(state["rows"])
    rows.append(_row(state["l"] + 1, state["truth"], posterior, state["z"], J))
    snapshots = list(state.get("snapshots", []))
    if state.get("dump_particles"):
        snapshots.append(posterior)

    return {
        "J": J,
        "l": state["l"] + 1,
        "rows": rows,
        "snapshots": snapshots,
        "current_step": "inform",
    }


def compile_results(state: EpisodeState) -> Dict[str, Any]:
    """Assemble the EpisodeLog from the per-step records."""
    cfg: OcpConfig = state["cfg"]
    frame = pd.DataFrame(state["rows"], columns=EPISODE_COLUMNS)
    frame["k"] = frame["k"].astype(int)
    log = EpisodeLog(
        frame=frame,
        seed=state["seed"],
        arm=state.get("arm", "fisher"),
        final_distance=_final_distance(state["truth"], cfg.x_ta),
        degenerate_steps=list(state.get("degenerate_steps", [])),
        line_search_failures=state.get("line_search_failures", 0),
        off_map_solves=state.get("off_map_solves", 0),
        snapshots=list(state.get("snapshots", [])),
        solves=list(state.get("solves", [])),
    )
    return {"log": log, "current_step": "compile_results", "status": "complete"}


# ────────────────────────────────────────────────────────────
# Loop or stop
# ────────────────────────────────────────────────────────────


def should_continue(state: EpisodeState) -> str:
    """Loop back to planning until the final time T is reached."""
    if state["l"] < state["cfg"].horizon:
        return "continue"
    return "finish"


# ────────────────────────────────────────────────────────────
# Build the LangGraph StateGraph
# ────────────────────────────────────────────────────────────


def create_episode_graph():
    """
    Create and compile the Fisher feedback control StateGraph.

    Returns:
        A compiled LangGraph that accepts EpisodeState as input.
    """
    graph = StateGraph(EpisodeState)

    graph.add_node("initialize", initialize)
    graph.add_node("plan", plan)
    graph.add_node("actuate", actuate)
    graph.add_node("propagate", propagate)
    graph.add_node("sense", sense)
    graph.add_node("reweight", reweight)
    graph.add_node("resample", resample)
    graph.add_node("inform", inform)
    graph.add_node("compile_results", compile_results)

    graph.set_entry_point("initialize")

    graph.add_edge("initialize", "plan")
    graph.add_edge("plan", "actuate")
    graph.add_edge("actuate", "propagate")
    graph.add_edge("propagate", "sense")
    graph.add_edge("sense", "reweight")
    graph.add_edge("reweight", "resample")
    graph.add_edge("resample", "inform")

    graph.add_conditional_edges(
        "inform",
        should_continue,
        {
            "continue": "plan",
            "finish": "compile_results",
        },
    )
    graph.add_edge("compile_results", END)

    return graph.compile()


def fisher_feedback_episode(
    cfg: OcpConfig,
    scenario: Scenario,
    seed: int,
    truth_noise_hook: Optional[TruthNoiseHook] = None,
    dump_particles: bool = False,
    arm: str = "fisher",
) -> EpisodeLog:
    """
    Run one closed-loop episode of Fisher feedback control.

    Args:
        cfg: planner settings (beta > 0 gives the dual-effect policy).
        scenario: dynamics, terrain, noise, prior and particle count.
        seed: episode seed; every random stream is derived from it.
        truth_noise_hook: optional filter on the truth noise drawn after each control.
        dump_particles: keep the weighted posterior of every step in the log.

    Returns:
        The EpisodeLog of steps 0..T.
    """
    graph = create_episode_graph()

    initial_state: EpisodeState = {
        "cfg": cfg,
        "scenario": scenario,
        "seed": seed,
        "arm": arm,
        "truth_noise_hook": truth_noise_hook,
        "dump_particles": dump_particles,
        "current_step": "",
        "status": "running",
    }

    logger.info("Episode start: arm=%s seed=%d N=%d T=%d", arm, seed, scenario.n_particles, cfg.horizon)
    try:
        result = graph.invoke(initial_state, config={"recursion_limit": 8 * cfg.horizon + 16})
    except NavigationError as e:
        logger.error("Episode arm=%s seed=%d aborted: %s", arm, seed, e)
        raise

    log: EpisodeLog = result["log"]
    logger.info(
        "Episode end: arm=%s seed=%d final distance %.3f m, tr(J_T) %.4g",
        arm, seed, log.final_distance, log.trace_J()[-1],
    )
    return log


def straight_baseline_episode(cfg: OcpConfig, scenario: Scenario, seed: int, **kwargs) -> EpisodeLog:
    """The same episode with the Fisher weight forced to zero."""
    return fisher_feedback_episode(replace(cfg, beta=0.0), scenario, seed, arm="straight", **kwargs)
