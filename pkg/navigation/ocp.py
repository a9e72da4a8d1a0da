"""
OCP — the deterministic multi-particle optimal control problem solved at each step.

Starting from the Ns most likely particles at step l, a control sequence
u_l .. u_{T-1} is rolled out through every particle, the Fisher information
is propagated along the weighted rollout states, and the cost

    sum_k [ alpha |u_k|^2 + beta / tr(J_k) ]
        + sum_i w_i gamma |mask * (x_T^(i) - x_ta)|^2 + beta / tr(J_T)

is minimized with L-BFGS-B on central finite-difference gradients. All
perturbations of one gradient are evaluated as a single batched rollout.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import minimize

from navigation.fisher import FimMatrix, fim_step, fisher_cost
from navigation.particle_filter import ParticleSet
from navigation.plant import (
    CONTROL_DIM,
    STATE_DIM,
    ControlBounds,
    LinearDynamics,
    NoiseModel,
    sample_process_noise,
    step,
)
from navigation.terrain import TerrainMap

logger = logging.getLogger(__name__)

FD_RELATIVE_STEP = 1e-4
GRADIENT_TOLERANCE = 1e-6
DEFAULT_HULL_PENALTY = 1e3


class NoiseMode(str, Enum):
    ZERO_NOISE = "zero_noise"              # certainty-equivalent rollouts
    FROZEN_SAMPLES = "frozen_samples"      # one xi draw per solve, reused by every evaluation


class TerminalMultiplicity(str, Enum):
    ONCE = "once"
    PER_STEP = "per_step"                  # terminal term nested inside the time sum


# ────────────────────────────────────────────────────────────
# Problem definition
# ────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class OcpConfig:
    """Weights, target and solver settings of the planning problem."""

    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 1e-2
    x_ta: NDArray = field(default_factory=lambda: np.zeros(STATE_DIM))
    horizon: int = 20
    n_s: int = 100
    noise_mode: NoiseMode = NoiseMode.ZERO_NOISE
    bounds: Optional[ControlBounds] = None
    terminal_mask: NDArray = field(default_factory=lambda: np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]))
    terminal_multiplicity: TerminalMultiplicity = TerminalMultiplicity.ONCE
    hull_penalty: float = DEFAULT_HULL_PENALTY
    max_iterations: int = 200

    def __post_init__(self):
        object.__setattr__(self, "x_ta", np.asarray(self.x_ta, dtype=float))
        object.__setattr__(self, "terminal_mask", np.asarray(self.terminal_mask, dtype=float))
        object.__setattr__(self, "noise_mode", NoiseMode(self.noise_mode))
        object.__setattr__(self, "terminal_multiplicity", TerminalMultiplicity(self.terminal_multiplicity))

        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.n_s < 1:
            raise ValueError(f"n_s must be >= 1, got {self.n_s}")
        for name in ("alpha", "beta", "gamma", "hull_penalty"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if self.x_ta.shape != (STATE_DIM,) or self.terminal_mask.shape != (STATE_DIM,):
            raise ValueError("x_ta and terminal_mask must have 6 entries")
        if np.any(self.terminal_mask < 0):
            raise ValueError("terminal_mask entries must be non-negative")


@dataclass(frozen=True, eq=False)
class RolloutBundle:
    """Rollout of one control sequence from the planning particles at step l."""

    controls: NDArray           # (n, 3)
    trajectories: NDArray       # (n + 1, Ns, 6), k = l .. T
    fims: NDArray               # (n + 1, 6, 6), J_l .. J_T
    hull_sq: NDArray            # (n, Ns), squared distance outside the map at k = l+1 .. T
    control_terms: NDArray      # (n,)
    fisher_terms: NDArray       # (n + 1,)
    terminal_term: float
    penalty_term: float

    @property
    def off_map(self) -> bool:
        return bool(np.any(self.hull_sq > 0))


# ────────────────────────────────────────────────────────────
# Batched rollout and cost assembly
# ────────────────────────────────────────────────────────────


def _simulate(x0, weights, U, J0, dyn, terrain, nm, xi):
    """Propagate (P, n, 3) control batches; returns states, FIMs and hull distances."""
    P, n, _ = U.shape
    x = np.broadcast_to(x0, (P,) + x0.shape)
    J = np.broadcast_to(J0, (P, STATE_DIM, STATE_DIM))
    states, fims, hull = [x], [J], []
    for k in range(n):
        noise = 0.0 if xi is None else xi[:, k, :]
        x = step(dyn, x, U[:, k, None, :], noise)
        J = fim_step(J, dyn, nm, x, weights, terrain)
        states.append(x)
        fims.append(J)
        hull.append(terrain.hull_distance(x[..., 0], x[..., 1]) ** 2)
    return np.stack(states, axis=1), np.stack(fims, axis=1), np.stack(hull, axis=1)


def _cost_terms(U, final_states, fims, hull_sq, weights, cfg: OcpConfig):
    control = cfg.alpha * np.sum(U ** 2, axis=-1)
    fisher = fisher_cost(fims, cfg.beta)
    offset = (final_states - cfg.x_ta) * cfg.terminal_mask
    terminal = cfg.gamma * (np.sum(offset ** 2, axis=-1) @ weights)
    penalty = cfg.hull_penalty * np.einsum("...kn,n->...", hull_sq, weights)
    return control, fisher, terminal, penalty


def _combine(control, fisher, terminal, penalty, cfg: OcpConfig):
    n = control.shape[-1]
    multiplicity = n if cfg.terminal_multiplicity is TerminalMultiplicity.PER_STEP else 1
    return (
        np.sum(control, axis=-1)
        + np.sum(fisher[..., :-1], axis=-1)
        + multiplicity * (terminal + fisher[..., -1])
        + penalty
    )


def _batch_costs(init_set: ParticleSet, U, J_current, dyn, terrain, nm, cfg, xi) -> NDArray:
    states, fims, hull_sq = _simulate(init_set.particles, init_set.weights, U, J_current, dyn, terrain, nm, xi)
    return _combine(*_cost_terms(U, states[:, -1], fims, hull_sq, init_set.weights, cfg), cfg)


def _as_controls(controls: ArrayLike, n: int) -> NDArray:
    U = np.asarray(controls, dtype=float).reshape(-1, CONTROL_DIM)
    if U.shape[0] != n:
        raise ValueError(f"expected {n} controls for the remaining horizon, got {U.shape[0]}")
    return U


def remaining_steps(init_set: ParticleSet, cfg: OcpConfig) -> int:
    return cfg.horizon - init_set.k


def frozen_noise(nm: NoiseModel, n_s: int, n: int, rng: np.random.Generator) -> NDArray:
    """One process-noise draw per rollout particle and step, shape (Ns, n, 6)."""
    return sample_process_noise(nm, rng, size=n_s * n).reshape(n_s, n, STATE_DIM)


def rollout(
    init_set: ParticleSet,
    controls: ArrayLike,
    dyn: LinearDynamics,
    terrain: TerrainMap,
    nm: NoiseModel,
    cfg: OcpConfig,
    J_current: FimMatrix,
    xi: Optional[NDArray] = None,
) -> RolloutBundle:
    """
    Roll the control sequence through every planning particle.

    Args:
        init_set: the Ns planning particles at step l (from top_k).
        controls: u_l .. u_{T-1}, shape (T - l, 3).
        J_current: the filter's information matrix at step l.
        xi: frozen process noise (Ns, T - l, 6); None for zero-noise rollouts.

    Returns:
        RolloutBundle with trajectories, the J sequence and the cost breakdown.
    """
    U = _as_controls(controls, remaining_steps(init_set, cfg))
    states, fims, hull_sq = _simulate(init_set.particles, init_set.weights, U[None], J_current, dyn, terrain, nm, xi)
    control, fisher, terminal, penalty = _cost_terms(U[None], states[:, -1], fims, hull_sq, init_set.weights, cfg)
    return RolloutBundle(
        controls=U,
        trajectories=states[0],
        fims=fims[0],
        hull_sq=hull_sq[0],
        control_terms=control[0],
        fisher_terms=fisher[0],
        terminal_term=float(terminal[0]),
        penalty_term=float(penalty[0]),
    )


def total_cost(bundle: RolloutBundle, weights: NDArray, cfg: OcpConfig) -> float:
    """Planning cost of a rollout; terminal and hull terms are weighted by the particle weights."""
    terms = _cost_terms(
        bundle.controls[None], bundle.trajectories[None, -1], bundle.fims[None], bundle.hull_sq[None], weights, cfg
    )
    return float(_combine(*terms, cfg)[0])


# ────────────────────────────────────────────────────────────
# Gradient
# ────────────────────────────────────────────────────────────


def _value_and_grad(init_set, U, J_current, dyn, terrain, nm, cfg, xi, rel_step=FD_RELATIVE_STEP):
    """Cost and central-difference gradient from one batch of 2m + 1 rollouts."""
    u = U.ravel()
    m = u.size
    h = rel_step * np.maximum(1.0, np.abs(u))
    batch = np.tile(u, (2 * m + 1, 1))
    idx = np.arange(m)
    batch[1 + idx, idx] += h
    batch[1 + m + idx, idx] -= h
    costs = _batch_costs(init_set, batch.reshape(2 * m + 1, -1, CONTROL_DIM), J_current, dyn, terrain, nm, cfg, xi)
    grad = (costs[1:m + 1] - costs[m + 1:]) / (2.0 * h)
    return float(costs[0]), grad


def grad_fd(
    init_set: ParticleSet,
    controls: ArrayLike,
    dyn: LinearDynamics,
    terrain: TerrainMap,
    nm: NoiseModel,
    cfg: OcpConfig,
    J_current: FimMatrix,
    xi: Optional[NDArray] = None,
    rel_step: float = FD_RELATIVE_STEP,
) -> NDArray:
    """
    Central finite-difference gradient of the planning cost.

    Step per coordinate is rel_step * max(1, |u|); the frozen noise xi is
    shared by every perturbation so the objective stays deterministic.

    Returns:
        Gradient of shape (T - l, 3).
    """
    U = _as_controls(controls, remaining_steps(init_set, cfg))
    _, grad = _value_and_grad(init_set, U, J_current, dyn, terrain, nm, cfg, xi, rel_step)
    return grad.reshape(U.shape)


# ────────────────────────────────────────────────────────────
# Solver
# ────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class SolveResult:
    controls: NDArray
    cost: float
    iterations: int
    initial_cost: float
    history: List[Dict[str, float]]
    line_search_failed: bool = False
    off_map: bool = False
    message: str = ""


def shift_warm_start(previous: NDArray, steps: int) -> NDArray:
    """Drop the applied control and repeat the last one up to `steps` rows."""
    shifted = np.asarray(previous, dtype=float)[1:]
    if steps <= 0:
        return np.zeros((0, CONTROL_DIM))
    if shifted.shape[0] == 0:
        return np.zeros((steps, CONTROL_DIM))
    if shifted.shape[0] >= steps:
        return shifted[:steps].copy()
    pad = np.repeat(shifted[-1:], steps - shifted.shape[0], axis=0)
    return np.vstack([shifted, pad])


def solve(
    init_set: ParticleSet,
    warm: Optional[ArrayLike],
    dyn: LinearDynamics,
    terrain: TerrainMap,
    nm: NoiseModel,
    cfg: OcpConfig,
    J_current: FimMatrix,
    rng: Optional[np.random.Generator] = None,
) -> SolveResult:
    """
    Minimize the planning cost over u_l .. u_{T-1} with L-BFGS-B.

    Terminates when the projected-gradient inf-norm falls below
    1e-6 * (1 + |cost|), after cfg.max_iterations iterations, or on a line-search
    failure (flagged, best point kept). The returned cost never exceeds the
    warm-start cost.

    Args:
        warm: initial control sequence; zeros when None.
        rng: solver stream, required for NoiseMode.FROZEN_SAMPLES.
    """
    n = remaining_steps(init_set, cfg)
    U0 = np.zeros((n, CONTROL_DIM)) if warm is None else _as_controls(warm, n)
    if cfg.bounds is not None:
        U0 = cfg.bounds.clip(U0)

    xi = None
    if cfg.noise_mode is NoiseMode.FROZEN_SAMPLES:
        if rng is None:
            raise ValueError("frozen_samples noise mode needs a solver rng")
        xi = frozen_noise(nm, init_set.size, n, rng)

    cache: Dict[bytes, Tuple[float, NDArray]] = {}

    def objective(u: NDArray):
        key = u.tobytes()
        if key not in cache:
            cache[key] = _value_and_grad(init_set, u.reshape(n, CONTROL_DIM), J_current, dyn, terrain, nm, cfg, xi)
        return cache[key]

    x0 = U0.ravel()
    cost0, grad0 = objective(x0)
    history: List[Dict[str, float]] = [
        {"iteration": 0, "cost": cost0, "grad_norm": float(np.max(np.abs(grad0))), "step_length": 0.0}
    ]
    last = {"x": x0}

    def record(xk: NDArray):
        cost, grad = objective(np.array(xk, dtype=float))
        history.append({
            "iteration": len(history),
            "cost": cost,
            "grad_norm": float(np.max(np.abs(grad))),
            "step_length": float(np.linalg.norm(xk - last["x"])),
        })
        last["x"] = np.array(xk, dtype=float)

    bounds = None
    if cfg.bounds is not None:
        bounds = list(zip(np.tile(cfg.bounds.lower, n), np.tile(cfg.bounds.upper, n)))

    result = minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        callback=record,
        options={
            "maxiter": cfg.max_iterations,
            "gtol": GRADIENT_TOLERANCE * (1.0 + abs(cost0)),
            "ftol": 1e-15,
            "maxls": 40,
        },
    )

    message = str(result.message)
    line_search_failed = "ABNORMAL" in message.upper()
    if line_search_failed:
        logger.warning("Line search failed at step %d after %d iterations; keeping best iterate", init_set.k, result.nit)

    x_best, cost_best = np.asarray(result.x, dtype=float), float(result.fun)
    if not cost_best <= cost0:
        x_best, cost_best = x0, cost0

    controls = x_best.reshape(n, CONTROL_DIM)
    off_map = rollout(init_set, controls, dyn, terrain, nm, cfg, J_current, xi).off_map
    if off_map:
        logger.warning("Planned rollout at step %d leaves the terrain map", init_set.k)

    logger.debug("Solve at step %d: %d iterations, cost %.6g -> %.6g", init_set.k, result.nit, cost0, cost_best)
    return SolveResult(
        controls=controls,
        cost=cost_best,
        iterations=int(result.nit),
        initial_cost=cost0,
        history=history,
        line_search_failed=line_search_failed,
        off_map=off_map,
        message=message,
    )


# ────────────────────────────────────────────────────────────
# Diagnostics
# ────────────────────────────────────────────────────────────


def diagnostics_frame(results: Iterable[Tuple[int, SolveResult]]) -> pd.DataFrame:
    """Rows `k,iteration,cost,grad_norm,step_length` for (step, result) pairs."""
    rows: List[Dict[str, Any]] = []
    for k, res in results:
        rows.extend({"k": k, **entry} for entry in res.history)
    return pd.DataFrame(rows, columns=["k", "iteration", "cost", "grad_norm", "step_length"])


def write_diagnostics(results: Iterable[Tuple[int, SolveResult]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    diagnostics_frame(results).to_csv(path, index=False, float_format="%.17g")
    logger.info("Wrote solver diagnostics to %s", path)
    return path
