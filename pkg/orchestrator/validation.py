"""
Validation — Kalman oracle and the numerical validation suites.

On PlaneMap terrain the observation is affine, so the exact posterior is
Gaussian and the Kalman filter computes it. The suites compare the
particle filter, the Fisher recursion and the finite-difference gradients
against that oracle and against closed-form references:

    kf    Fisher recursion vs Kalman covariances, particle filter vs Kalman means,
          innovation whiteness
    fim   the two algebraic forms of the Fisher step
    grad  FD gradient vs the quadratic closed form, Richardson consistency,
          mirror antisymmetry, LQ solve
    crlb  error covariance of the filter vs the inverse Fisher information

Every tolerance is multiplied by DUALNAV_TOL_SCALE (default 1).
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy import linalg

from navigation import particle_filter as pf
from navigation.errors import ConfigError, NonPlaneMap
from navigation.fisher import fim_init, fim_step, fim_step_information_form
from navigation.ocp import OcpConfig, TerminalMultiplicity, grad_fd, rollout, solve, total_cost
from navigation.plant import (
    InitialBelief,
    LinearDynamics,
    NoiseModel,
    double_integrator,
    observe,
    sample_obs_noise,
    sample_process_noise,
    step,
    symmetric_factor,
)
from navigation.terrain import Bump, GaussianFieldMap, PlaneMap, TerrainMap, corridor_field
from orchestrator.config import (
    PlaneTerrain,
    RunConfig,
    Scenario,
    Stream,
    build_scenario,
    default_config,
    run_seed,
    stream_rng,
)

logger = logging.getLogger(__name__)

PLANE_PRESETS: Dict[str, Tuple[float, float]] = {
    "flat": (0.0, 0.0),
    "tilted": (0.05, 0.02),
    "steep": (0.3, -0.2),
}
SUITES = ("kf", "grad", "fim", "crlb")


def tol_scale() -> float:
    """Multiplier applied to every validation tolerance, from DUALNAV_TOL_SCALE."""
    raw = os.getenv("DUALNAV_TOL_SCALE", "1")
    try:
        scale = float(raw)
    except ValueError as e:
        raise ConfigError(f"DUALNAV_TOL_SCALE must be a number, got {raw!r}") from e
    if not np.isfinite(scale) or scale < 0:
        raise ConfigError(f"DUALNAV_TOL_SCALE must be finite and >= 0, got {raw!r}")
    return scale


# ────────────────────────────────────────────────────────────
# Report
# ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"[{verdict}] {self.name}: measured={self.measured:.3e} tolerance={self.tolerance:.3e}"


def check_below(name: str, measured: float, tolerance: float) -> CheckResult:
    result = CheckResult(name, float(measured), float(tolerance), bool(measured < tolerance))
    logger.info(result.line())
    return result


def check_above(name: str, measured: float, floor: float) -> CheckResult:
    result = CheckResult(name, float(measured), float(floor), bool(measured >= floor))
    logger.info(result.line())
    return result


@dataclass
class ValidationReport:
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def extend(self, other: "ValidationReport") -> "ValidationReport":
        self.checks.extend(other.checks)
        return self

    def lines(self) -> List[str]:
        return [c.line() for c in self.checks]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(c) for c in self.checks], columns=["name", "measured", "tolerance", "passed"])


# ────────────────────────────────────────────────────────────
# Kalman oracle
# ────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class KalmanOracle:
    """Exact linear-Gaussian posterior means and covariances for steps 0..T."""

    means: NDArray                  # (T + 1, 6)
    covariances: NDArray            # (T + 1, 6, 6)
    innovations: NDArray            # (T + 1,) or (T,) without the initial update
    innovation_variances: NDArray


def plane_observation(plane: TerrainMap) -> Tuple[NDArray, float]:
    """Row H and offset c of z = H x - c + eta on a PlaneMap."""
    if not isinstance(plane, PlaneMap):
        raise NonPlaneMap(f"the Kalman oracle needs a PlaneMap, got {type(plane).__name__}")
    return np.array([-plane.a, -plane.b, 1.0, 0.0, 0.0, 0.0]), plane.c


def kalman_oracle(
    dyn: LinearDynamics,
    plane: TerrainMap,
    nm: NoiseModel,
    belief: InitialBelief,
    controls: NDArray,
    observations: NDArray,
    update_at_init: bool = True,
) -> KalmanOracle:
    """
    Kalman filter on PlaneMap terrain.

    Args:
        controls: u_0 .. u_{T-1}, shape (T, 3).
        observations: z_0 .. z_T, shape (T + 1,).

    Raises:
        NonPlaneMap: the terrain is not a PlaneMap.
    """
    H, c = plane_observation(plane)
    controls = np.asarray(controls, dtype=float).reshape(-1, 3)
    observations = np.asarray(observations, dtype=float)
    if observations.shape[0] != controls.shape[0] + 1:
        raise ValueError("need one more observation than controls")

    eye = np.eye(H.size)
    m, P = belief.m0.copy(), belief.P0.copy()
    innovations, variances = [], []

    def kf_update(m, P, z):
        S = float(H @ P @ H + nm.R)
        K = P @ H / S
        nu = z - (H @ m - c)
        A = eye - np.outer(K, H)
        innovations.append(nu)
        variances.append(S)
        return m + K * nu, A @ P @ A.T + nm.R * np.outer(K, K)

    if update_at_init:
        m, P = kf_update(m, P, observations[0])
    means, covariances = [m], [P]
    for u, z in zip(controls, observations[1:]):
        m = dyn.F @ m + dyn.B @ u
        P = dyn.F @ P @ dyn.F.T + nm.Q
        m, P = kf_update(m, P, z)
        means.append(m)
        covariances.append(0.5 * (P + P.T))
    return KalmanOracle(
        means=np.array(means),
        covariances=np.array(covariances),
        innovations=np.array(innovations),
        innovation_variances=np.array(variances),
    )


def fisher_sequence(scenario: Scenario, steps: int) -> NDArray:
    """J_0 .. J_steps on a PlaneMap, where the observation Jacobian is constant."""
    point, weight = scenario.belief.m0[None], np.ones(1)
    J = fim_init(scenario.belief, point, weight, scenario.terrain, scenario.noise, scenario.update_at_init)
    sequence = [J]
    for _ in range(steps):
        J = fim_step(J, scenario.dyn, scenario.noise, point, weight, scenario.terrain)
        sequence.append(J)
    return np.array(sequence)


# ────────────────────────────────────────────────────────────
# Open-loop truth and filter runs (no planning)
# ────────────────────────────────────────────────────────────


def simulate_truth(scenario: Scenario, controls: NDArray, seed: int) -> Tuple[NDArray, NDArray]:
    """True states and observations under the episode seed streams."""
    L0 = symmetric_factor(scenario.belief.P0)
    x = scenario.belief.m0 + L0 @ stream_rng(seed, Stream.TRUTH_INIT).standard_normal(L0.shape[0])
    eta0 = sample_obs_noise(scenario.noise, stream_rng(seed, Stream.TRUTH_OBS, 0))
    states, observations = [x], [float(observe(x, scenario.terrain, eta0))]
    for l, u in enumerate(controls):
        xi = sample_process_noise(scenario.noise, stream_rng(seed, Stream.TRUTH_PROCESS, l))
        x = step(scenario.dyn, x, u, xi)
        eta = sample_obs_noise(scenario.noise, stream_rng(seed, Stream.TRUTH_OBS, l + 1))
        states.append(x)
        observations.append(float(observe(x, scenario.terrain, eta)))
    return np.array(states), np.array(observations)


def filter_means(scenario: Scenario, controls: NDArray, observations: NDArray, seed: int) -> NDArray:
    """Posterior means of the bootstrap filter fed with given controls and observations."""
    rng = stream_rng(seed, Stream.FILTER)
    pset = pf.init(scenario.belief, scenario.n_particles, rng)
    if scenario.update_at_init:
        pset = pf.update(pset, observations[0], scenario.terrain, scenario.noise)
    means = [pf.mean(pset)]
    for u, z in zip(controls, observations[1:]):
        pset = pf.resample_systematic(pset, rng)
        pset = pf.predict(pset, scenario.dyn, u, scenario.noise, rng)
        pset = pf.update(pset, z, scenario.terrain, scenario.noise)
        means.append(pf.mean(pset))
    return np.array(means)


def open_loop_controls(steps: int) -> NDArray:
    """A fixed gentle manoeuvre used by the filter-only checks."""
    return np.tile([0.05, -0.02, 0.0], (steps, 1))


def plane_scenario(cfg: RunConfig, a: float, b: float, n_particles: Optional[int] = None) -> Scenario:
    update = {"terrain": PlaneTerrain(a=a, b=b, c=0.0)}
    if n_particles is not None:
        update["n_particles"] = n_particles
    return build_scenario(cfg.model_copy(update=update))


# ────────────────────────────────────────────────────────────
# kf suite
# ────────────────────────────────────────────────────────────


def validate_kf_fisher(cfg: RunConfig, steps: int = 20) -> ValidationReport:
    """J_k^-1 against the Kalman posterior covariance on every plane preset."""
    report = ValidationReport()
    for name, (a, b) in PLANE_PRESETS.items():
        scenario = plane_scenario(cfg, a, b)
        controls = np.zeros((steps, 3))
        oracle = kalman_oracle(
            scenario.dyn, scenario.terrain, scenario.noise, scenario.belief, controls,
            np.zeros(steps + 1), scenario.update_at_init,
        )
        inverse = np.linalg.inv(fisher_sequence(scenario, steps))
        deviation = np.max(np.abs(inverse - oracle.covariances)) / np.max(np.abs(oracle.covariances))
        report.checks.append(check_below(f"kf.fisher_covariance[{name}]", deviation, 1e-8 * tol_scale()))
    return report


def validate_pf_against_kf(
    cfg: RunConfig,
    n_particles: int = 10_000,
    runs: int = 20,
    presets: Optional[Sequence[str]] = None,
) -> ValidationReport:
    """
    Per-step filter-mean bias against the Kalman mean, normalized by the Kalman std.

    Passes when |mean over runs| < 0.2 for every step and coordinate.
    """
    report = ValidationReport()
    steps = cfg.ocp.horizon
    controls = open_loop_controls(steps)
    for name in presets or PLANE_PRESETS:
        a, b = PLANE_PRESETS[name]
        scenario = plane_scenario(cfg, a, b, n_particles)
        normalized = []
        for r in range(runs):
            seed = run_seed(cfg.seed, r)
            _, observations = simulate_truth(scenario, controls, seed)
            oracle = kalman_oracle(
                scenario.dyn, scenario.terrain, scenario.noise, scenario.belief, controls,
                observations, scenario.update_at_init,
            )
            std = np.sqrt(np.diagonal(oracle.covariances, axis1=1, axis2=2))
            normalized.append((filter_means(scenario, controls, observations, seed) - oracle.means) / std)
        bias = np.max(np.abs(np.mean(normalized, axis=0)))
        report.checks.append(check_below(f"kf.pf_bias[{name}]", bias, 0.2 * tol_scale()))
    return report


def validate_innovations(cfg: RunConfig, runs: int = 20, steps: int = 500) -> ValidationReport:
    """Sample mean of normalized Kalman innovations within 3 standard errors of zero."""
    a, b = PLANE_PRESETS["tilted"]
    scenario = plane_scenario(cfg, a, b)
    controls = np.zeros((steps, 3))
    normalized = []
    for r in range(runs):
        _, observations = simulate_truth(scenario, controls, run_seed(cfg.seed, r))
        oracle = kalman_oracle(
            scenario.dyn, scenario.terrain, scenario.noise, scenario.belief, controls,
            observations, scenario.update_at_init,
        )
        normalized.append(oracle.innovations / np.sqrt(oracle.innovation_variances))
    normalized = np.concatenate(normalized)
    bound = 3.0 / np.sqrt(normalized.size)
    return ValidationReport([check_below("kf.innovation_mean", abs(np.mean(normalized)), bound * tol_scale())])


# ────────────────────────────────────────────────────────────
# fim suite
# ────────────────────────────────────────────────────────────


def random_pd(rng: np.random.Generator, dim: int = 6, floor: float = 0.5) -> NDArray:
    A = rng.standard_normal((dim, dim))
    return A @ A.T + floor * np.eye(dim)


def validate_fim_forms(trials: int = 100, seed: int = 0) -> ValidationReport:
    """D-matrix and information-filter Fisher steps on random PD inputs and particle clouds."""
    rng = np.random.default_rng(seed)
    terrain = corridor_field()
    worst, worst_symmetry, min_eig = 0.0, 0.0, np.inf
    for _ in range(trials):
        dyn = double_integrator(rng.uniform(0.5, 10.0))
        nm = NoiseModel.diagonal(rng.uniform(0.05, 2.0, 6), rng.uniform(0.5, 9.0))
        J = random_pd(rng)
        points = np.column_stack([
            rng.uniform(0.0, 2000.0, 50), rng.uniform(-200.0, 800.0, 50), rng.normal(100.0, 5.0, (50, 4)),
        ])
        weights = pf.normalize(rng.random(50))
        J_d = fim_step(J, dyn, nm, points, weights, terrain)
        J_i = fim_step_information_form(J, dyn, nm, points, weights, terrain)
        worst = max(worst, np.max(np.abs(J_d - J_i)) / max(1.0, np.max(np.abs(J_d))))
        worst_symmetry = max(worst_symmetry, np.max(np.abs(J_d - J_d.T)))
        min_eig = min(min_eig, np.min(np.linalg.eigvalsh(J_d)))
    scale = tol_scale()
    return ValidationReport([
        check_below("fim.forms_agree", worst, 1e-9 * scale),
        check_below("fim.symmetric", worst_symmetry, 1e-10 * scale),
        check_above("fim.positive_definite", min_eig, 0.0),
    ])


# ────────────────────────────────────────────────────────────
# grad suite
# ────────────────────────────────────────────────────────────


def control_to_terminal(dyn: LinearDynamics, n: int) -> NDArray:
    """G with x_T = F^n x_l + G vec(u_l .. u_{T-1})."""
    blocks = [np.linalg.matrix_power(dyn.F, n - 1 - k) @ dyn.B for k in range(n)]
    return np.hstack(blocks)


def _terminal_weight(cfg: OcpConfig, n: int) -> float:
    return cfg.gamma * (n if cfg.terminal_multiplicity is TerminalMultiplicity.PER_STEP else 1)


def quadratic_gradient(init_set: pf.ParticleSet, controls: NDArray, dyn: LinearDynamics, cfg: OcpConfig) -> NDArray:
    """Exact gradient of the control and terminal terms (beta = 0, no hull penalty)."""
    n = controls.shape[0]
    G = control_to_terminal(dyn, n)
    Fn = np.linalg.matrix_power(dyn.F, n)
    M2 = cfg.terminal_mask ** 2
    residual = pf.mean(init_set) @ Fn.T + G @ controls.ravel() - cfg.x_ta
    grad = 2.0 * cfg.alpha * controls.ravel() + 2.0 * _terminal_weight(cfg, n) * G.T @ (M2 * residual)
    return grad.reshape(controls.shape)


def lq_reference_controls(init_set: pf.ParticleSet, dyn: LinearDynamics, cfg: OcpConfig) -> NDArray:
    """
    Minimizer of the quadratic problem (beta = 0, no bounds) from the normal equations

        (alpha I + gamma G' M G) u = -gamma G' M (F^n x_mean - x_ta)
    """
    n = cfg.horizon - init_set.k
    G = control_to_terminal(dyn, n)
    Fn = np.linalg.matrix_power(dyn.F, n)
    M2 = np.diag(cfg.terminal_mask ** 2)
    gamma = _terminal_weight(cfg, n)
    A = cfg.alpha * np.eye(G.shape[1]) + gamma * G.T @ M2 @ G
    rhs = -gamma * G.T @ M2 @ (pf.mean(init_set) @ Fn.T - cfg.x_ta)
    return linalg.lstsq(A, rhs)[0].reshape(n, 3)


def _random_set(rng: np.random.Generator, n_s: int, center: NDArray, spread: NDArray) -> pf.ParticleSet:
    particles = center + spread * rng.standard_normal((n_s, center.size))
    return pf.ParticleSet(particles=particles, weights=pf.normalize(rng.random(n_s) + 0.1), k=0)


def _base_noise() -> NoiseModel:
    return NoiseModel.diagonal((1.0, 1.0, 1.0, 0.01, 0.01, 0.01), 4.0)


def validate_gradients(trials: int = 100, seed: int = 0) -> ValidationReport:
    rng = np.random.default_rng(seed)
    nm = _base_noise()
    flat = PlaneMap()
    center = np.array([0.0, 0.0, 100.0, 0.0, 0.0, 0.0])
    spread = np.array([50.0, 50.0, 5.0, 0.5, 0.5, 0.5])
    J0 = np.diag(1.0 / np.array([1e4, 1e4, 100.0, 1.0, 1.0, 1.0]))

    # quadratic closed form
    worst_quadratic = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 8))
        dyn = double_integrator(rng.uniform(1.0, 10.0))
        cfg = OcpConfig(
            alpha=rng.uniform(0.1, 2.0), beta=0.0, gamma=rng.uniform(1e-3, 1e-1),
            x_ta=np.array([rng.uniform(500, 2000), rng.uniform(-300, 300), 100.0, 0, 0, 0]), horizon=n, n_s=5,
        )
        init_set = _random_set(rng, 5, center, spread)
        U = rng.normal(0.0, 0.5, (n, 3))
        g_fd = grad_fd(init_set, U, dyn, flat, nm, cfg, J0)
        g_ref = quadratic_gradient(init_set, U, dyn, cfg)
        worst_quadratic = max(worst_quadratic, np.max(np.abs(g_fd - g_ref)) / np.max(np.abs(g_ref)))

    # Richardson h-halving on the corridor map
    terrain = corridor_field()
    dyn = double_integrator(10.0)
    cfg = OcpConfig(alpha=1.0, beta=500.0, gamma=1e-2, x_ta=np.array([2000.0, 0, 100.0, 0, 0, 0]), horizon=10, n_s=10)
    worst_richardson = 0.0
    for _ in range(max(1, trials // 10)):
        init_set = _random_set(rng, 10, center, spread)
        U = rng.normal(0.0, 0.3, (10, 3))
        g_h = grad_fd(init_set, U, dyn, terrain, nm, cfg, J0)
        g_half = grad_fd(init_set, U, dyn, terrain, nm, cfg, J0, rel_step=0.5e-4)
        worst_richardson = max(worst_richardson, np.max(np.abs(g_h - g_half)) / np.max(np.abs(g_h)))

    # mirrored bumps
    left = GaussianFieldMap(bumps=(Bump(center=(1000.0, 300.0), amplitude=40.0, width=150.0),))
    right = GaussianFieldMap(bumps=(Bump(center=(1000.0, -300.0), amplitude=40.0, width=150.0),))
    mirrored = pf.ParticleSet(particles=center[None], weights=np.ones(1), k=0)
    U0 = np.zeros((10, 3))
    g_left = grad_fd(mirrored, U0, dyn, left, nm, cfg, J0)
    g_right = grad_fd(mirrored, U0, dyn, right, nm, cfg, J0)
    asymmetry = np.max(np.abs(g_left[:, 1] + g_right[:, 1])) / max(np.max(np.abs(g_left)), 1e-300)

    # LQ solve
    lq_cfg = OcpConfig(alpha=1.0, beta=0.0, gamma=1e-2, x_ta=np.array([2000.0, 0, 100.0, 0, 0, 0]), horizon=10, n_s=5)
    init_set = _random_set(rng, 5, center, spread)
    result = solve(init_set, None, dyn, flat, nm, lq_cfg, J0)
    U_ref = lq_reference_controls(init_set, dyn, lq_cfg)
    ref_cost = total_cost(rollout(init_set, U_ref, dyn, flat, nm, lq_cfg, J0), init_set.weights, lq_cfg)
    lq_gap = abs(result.cost - ref_cost) / abs(ref_cost)

    scale = tol_scale()
    return ValidationReport([
        check_below("grad.quadratic_closed_form", worst_quadratic, 1e-6 * scale),
        check_below("grad.richardson", worst_richardson, 1e-4 * scale),
        check_below("grad.mirror_antisymmetry", asymmetry, 1e-9 * scale),
        check_below("grad.lq_solve_cost", lq_gap, 1e-4 * scale),
    ])


# ────────────────────────────────────────────────────────────
# crlb suite
# ────────────────────────────────────────────────────────────


def whitened_eigmin(errors: NDArray, J_sqrt: NDArray) -> float:
    """Smallest eigenvalue of J^1/2 C J^1/2 - I with C the mean outer product of the errors."""
    C = errors.T @ errors / errors.shape[0]
    W = J_sqrt @ C @ J_sqrt - np.eye(C.shape[0])
    return float(np.min(np.linalg.eigvalsh(0.5 * (W + W.T))))


def null_band(runs: int, dim: int, rng: np.random.Generator, replicates: int = 2000, level: float = 0.99) -> float:
    """
    Bootstrap band for whitened_eigmin when C equals J^-1 exactly.

    The smallest eigenvalue of a sample covariance is biased low, so the band
    is the level-quantile of -eigmin over replicate campaigns of `runs`
    standard normal errors.
    """
    draws = [whitened_eigmin(rng.standard_normal((runs, dim)), np.eye(dim)) for _ in range(replicates)]
    return float(-np.quantile(draws, 1.0 - level))


def validate_crlb(
    cfg: RunConfig,
    runs: int = 200,
    n_particles: int = 2000,
    checkpoints: Sequence[int] = (5, 10, 15, 20),
) -> ValidationReport:
    """Error covariance of the filter mean dominates J_k^-1 within the bootstrap band."""
    a, b = PLANE_PRESETS["tilted"]
    scenario = plane_scenario(cfg, a, b, n_particles)
    steps = max(checkpoints)
    controls = open_loop_controls(steps)

    errors = []
    for r in range(runs):
        seed = run_seed(cfg.seed, r)
        states, observations = simulate_truth(scenario, controls, seed)
        errors.append(filter_means(scenario, controls, observations, seed) - states)
    errors = np.array(errors)                          # (runs, steps + 1, 6)

    J = fisher_sequence(scenario, steps)
    band = null_band(runs, errors.shape[-1], np.random.default_rng(cfg.seed)) * tol_scale()
    report = ValidationReport()
    for k in checkpoints:
        vals, vecs = np.linalg.eigh(J[k])
        J_sqrt = (vecs * np.sqrt(vals)) @ vecs.T
        report.checks.append(check_above(f"crlb.eigmin[k={k}]", whitened_eigmin(errors[:, k], J_sqrt), -band))
    return report


# ────────────────────────────────────────────────────────────
# Suite dispatch
# ────────────────────────────────────────────────────────────


def run_suite(name: str, cfg: Optional[RunConfig] = None) -> ValidationReport:
    """Run one suite ("kf", "grad", "fim", "crlb") or "all"."""
    cfg = cfg or default_config()
    if name == "all":
        report = ValidationReport()
        for suite in SUITES:
            report.extend(run_suite(suite, cfg))
        return report
    logger.info("Running validation suite '%s'", name)
    if name == "kf":
        report = validate_kf_fisher(cfg)
        report.extend(validate_pf_against_kf(cfg))
        return report.extend(validate_innovations(cfg))
    if name == "fim":
        return validate_fim_forms(seed=cfg.seed)
    if name == "grad":
        return validate_gradients(seed=cfg.seed)
    if name == "crlb":
        return validate_crlb(cfg)
    raise ValueError(f"unknown suite '{name}', expected one of {SUITES + ('all',)}")
