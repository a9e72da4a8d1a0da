"""
Plant — double-integrator vehicle and scalar height-above-ground sensor.

State ordering is fixed as (x1, x2, x3, v1, v2, v3): position in meters,
velocity in m/s. Controls are commanded accelerations (u1, u2, u3) in m/s^2.

    X_{k+1} = F X_k + B U_k + xi_k
    Z_k     = x3_k - h_map(x1_k, x2_k) + eta_k

Every function accepts a single state of shape (6,) or a stack of shape
(..., 6), so the same code advances the true plant and a particle cloud.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from navigation.errors import FactorizationFailure, NonPositiveDt
from navigation.terrain import TerrainMap

STATE_DIM = 6
CONTROL_DIM = 3
STATE_LABELS = ("x1", "x2", "x3", "v1", "v2", "v3")
PSD_TOLERANCE = 1e-10

StateVec = NDArray[np.float64]
ControlVec = NDArray[np.float64]


# ────────────────────────────────────────────────────────────
# Domain types
# ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class LinearDynamics:
    F: NDArray
    B: NDArray
    dt: float


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean Gaussian disturbances: process covariance Q, observation variance R."""

    Q: NDArray
    R: float

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        if Q.shape != (STATE_DIM, STATE_DIM):
            raise ValueError(f"Q must be {STATE_DIM}x{STATE_DIM}, got {Q.shape}")
        if not np.allclose(Q, Q.T, atol=1e-12):
            raise ValueError("Q must be symmetric")
        if not float(self.R) > 0:
            raise ValueError(f"R must be positive, got {self.R}")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", float(self.R))

    @classmethod
    def diagonal(cls, q_diag: ArrayLike, r: float) -> "NoiseModel":
        return cls(Q=np.diag(np.asarray(q_diag, dtype=float)), R=r)


@dataclass(frozen=True)
class InitialBelief:
    """Gaussian prior N(m0, P0) on the initial state."""

    m0: NDArray
    P0: NDArray

    def __post_init__(self):
        m0 = np.asarray(self.m0, dtype=float)
        P0 = np.asarray(self.P0, dtype=float)
        if m0.shape != (STATE_DIM,) or P0.shape != (STATE_DIM, STATE_DIM):
            raise ValueError("m0 must have 6 entries and P0 must be 6x6")
        if not np.allclose(P0, P0.T, atol=1e-12):
            raise ValueError("P0 must be symmetric")
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "P0", P0)

    @classmethod
    def diagonal(cls, m0: ArrayLike, p0_diag: ArrayLike) -> "InitialBelief":
        return cls(m0=np.asarray(m0, dtype=float), P0=np.diag(np.asarray(p0_diag, dtype=float)))


@dataclass(frozen=True)
class ControlBounds:
    """Optional per-axis box on the commanded acceleration."""

    lower: Tuple[float, float, float]
    upper: Tuple[float, float, float]

    def __post_init__(self):
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ValueError(f"control bounds are inverted: {self.lower} > {self.upper}")

    def clip(self, u: ArrayLike) -> ControlVec:
        return np.clip(np.asarray(u, dtype=float), self.lower, self.upper)


# ────────────────────────────────────────────────────────────
# Dynamics
# ────────────────────────────────────────────────────────────


def double_integrator(dt: float) -> LinearDynamics:
    """
    Zero-order-hold double integrator on three axes.

    position' = position + dt * velocity + dt^2 / 2 * u
    velocity' = velocity + dt * u
    """
    if not dt > 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    eye = np.eye(CONTROL_DIM)
    F = np.block([[eye, dt * eye], [np.zeros((3, 3)), eye]])
    B = np.vstack([0.5 * dt * dt * eye, dt * eye])
    return LinearDynamics(F=F, B=B, dt=float(dt))


def step(dyn: LinearDynamics, x: ArrayLike, u: ArrayLike, xi: ArrayLike) -> StateVec:
    """F x + B u + xi, broadcast over leading dimensions."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return x @ dyn.F.T + u @ dyn.B.T + np.asarray(xi, dtype=float)


# ────────────────────────────────────────────────────────────
# Observation
# ────────────────────────────────────────────────────────────


def observe(x: ArrayLike, terrain: TerrainMap, eta: ArrayLike = 0.0, clamp: bool = False) -> NDArray:
    """Height above ground: x3 - h_map(x1, x2) + eta."""
    x = np.asarray(x, dtype=float)
    return x[..., 2] - terrain.height(x[..., 0], x[..., 1], clamp=clamp) + eta


def obs_jacobian(x: ArrayLike, terrain: TerrainMap, clamp: bool = False) -> NDArray:
    """
    Jacobian of observe with respect to the state.

    Returns shape (6,) for one state, (..., 6) for a stack:
    [-dh/dx1, -dh/dx2, 1, 0, 0, 0].
    """
    x = np.asarray(x, dtype=float)
    g1, g2 = terrain.gradient(x[..., 0], x[..., 1], clamp=clamp)
    H = np.zeros(x.shape[:-1] + (STATE_DIM,))
    H[..., 0] = -g1
    H[..., 1] = -g2
    H[..., 2] = 1.0
    return H


# ────────────────────────────────────────────────────────────
# Noise
# ────────────────────────────────────────────────────────────


def symmetric_factor(cov: ArrayLike) -> NDArray:
    """
    Square-root factor L of a PSD matrix (L @ L.T == cov).

    Uses the eigen-decomposition so singular matrices such as Q = 0 are accepted.
    """
    cov = np.asarray(cov, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    scale = max(1.0, float(np.max(np.abs(vals)))) if vals.size else 1.0
    if np.min(vals) < -PSD_TOLERANCE * scale:
        raise FactorizationFailure(f"covariance is not PSD (min eigenvalue {np.min(vals):.3e})")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_process_noise(nm: NoiseModel, rng: np.random.Generator, size: Optional[int] = None) -> NDArray:
    """Draw xi ~ N(0, Q); shape (6,) or (size, 6)."""
    L = symmetric_factor(nm.Q)
    shape = (STATE_DIM,) if size is None else (size, STATE_DIM)
    return rng.standard_normal(shape) @ L.T


def sample_obs_noise(nm: NoiseModel, rng: np.random.Generator, size: Optional[int] = None):
    """Draw eta ~ N(0, R); a float or an array of length size."""
    draws = np.sqrt(nm.R) * rng.standard_normal(size)
    return float(draws) if size is None else draws
