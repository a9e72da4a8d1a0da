"""
Fisher — recursive posterior Fisher Information Matrix.

For additive Gaussian noise and linear dynamics the recursion is

    D11 = F' Q^-1 F,   D12 = -F' Q^-1 = D21',   D22 = Q^-1 + I_obs
    J'  = D22 - D21 (J + D11)^-1 D12

with I_obs = sum_i w_i H(x_i)' R^-1 H(x_i), a Monte Carlo expectation over a
weighted point cloud (filter particles, or rollout states inside the
planner). The information-filter form J' = (Q + F J^-1 F')^-1 + I_obs is
kept as a second code path for cross-checking.

Functions accept a single J of shape (6, 6) or a batch (P, 6, 6); points
are then (N, 6) or (P, N, 6).
"""

from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy import linalg

from navigation.errors import NonPositiveTrace, SingularInner, SingularP0, SingularQ
from navigation.plant import InitialBelief, LinearDynamics, NoiseModel, obs_jacobian
from navigation.terrain import TerrainMap

CONDITION_LIMIT = 1e12

FimMatrix = NDArray[np.float64]


def symmetrize(M: NDArray) -> NDArray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def observation_information(points: NDArray, weights: NDArray, terrain: TerrainMap, nm: NoiseModel) -> NDArray:
    """Weighted expectation of H' R^-1 H over the points."""
    H = obs_jacobian(points, terrain, clamp=True)
    return np.einsum("...i,...ij,...ik->...jk", weights, H, H) / nm.R


def fim_init(
    belief: InitialBelief,
    points: NDArray,
    weights: NDArray,
    terrain: TerrainMap,
    nm: NoiseModel,
    update_at_init: bool = True,
) -> FimMatrix:
    """
    J_0 = P0^-1, plus the information of Z_0 when the prior is updated at k=0.

    Raises:
        SingularP0: P0 is not positive definite.
    """
    try:
        factor = linalg.cho_factor(belief.P0)
    except linalg.LinAlgError as e:
        raise SingularP0(f"P0 is not invertible: {e}") from e
    J0 = linalg.cho_solve(factor, np.eye(belief.P0.shape[0]))
    if update_at_init:
        J0 = J0 + observation_information(points, weights, terrain, nm)
    return symmetrize(J0)


def process_information(nm: NoiseModel) -> NDArray:
    """
    Q^-1 by Cholesky.

    Raises:
        SingularQ: Q is not positive definite (run Q = 0 limits as Q = eps I).
    """
    try:
        factor = linalg.cho_factor(nm.Q)
    except linalg.LinAlgError as e:
        raise SingularQ(f"Q is not positive definite: {e}") from e
    return symmetrize(linalg.cho_solve(factor, np.eye(nm.Q.shape[0])))


def _check_conditioning(inner: NDArray):
    cond = np.linalg.cond(inner)
    if np.any(~np.isfinite(cond)) or np.any(cond > CONDITION_LIMIT):
        raise SingularInner(f"J + D11 is ill-conditioned (cond={np.max(cond):.3e})")


def fim_step(
    J: FimMatrix,
    dyn: LinearDynamics,
    nm: NoiseModel,
    points: NDArray,
    weights: NDArray,
    terrain: TerrainMap,
    info: Optional[NDArray] = None,
) -> FimMatrix:
    """
    One step of the posterior information recursion (D-matrix form).

    Args:
        J: information at step k, (6, 6) or (P, 6, 6).
        points, weights: weighted states at step k+1 for the observation term.
        info: precomputed observation information, overrides points/weights.

    Raises:
        SingularQ: Q is not positive definite.
        SingularInner: J + D11 exceeds the conditioning bound.
    """
    Q_inv = process_information(nm)
    D11 = dyn.F.T @ Q_inv @ dyn.F
    D12 = -dyn.F.T @ Q_inv
    D21 = D12.T
    if info is None:
        info = observation_information(points, weights, terrain, nm)
    inner = J + D11
    _check_conditioning(inner)
    J_next = Q_inv + info - D21 @ np.linalg.solve(inner, np.broadcast_to(D12, inner.shape))
    return symmetrize(J_next)


def fim_step_information_form(
    J: FimMatrix,
    dyn: LinearDynamics,
    nm: NoiseModel,
    points: NDArray,
    weights: NDArray,
    terrain: TerrainMap,
) -> FimMatrix:
    """J' = (Q + F J^-1 F')^-1 + I_obs, algebraically equal to fim_step."""
    P_pred = dyn.F @ np.linalg.inv(J) @ dyn.F.T + nm.Q
    info = observation_information(points, weights, terrain, nm)
    return symmetrize(np.linalg.inv(symmetrize(P_pred)) + info)


def fisher_cost(J: FimMatrix, beta: float):
    """
    beta / tr(J): the estimation-quality term of the planning cost.

    Raises:
        NonPositiveTrace: tr(J) <= 0.
    """
    trace = np.trace(J, axis1=-2, axis2=-1)
    if np.any(~(trace > 0)):
        raise NonPositiveTrace(f"tr(J) must be positive, got {np.min(trace)}")
    return beta / trace
