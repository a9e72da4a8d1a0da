"""
Particle Filter — bootstrap filter representing p(X_k | I_k).

The weighted particle cloud is the belief the planner acts on and the
source of the state estimate (the weighted mean). Weight updates run in
the log domain; resampling is systematic.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from navigation.errors import BadCount, DegenerateWeights
from navigation.plant import (
    STATE_LABELS,
    ControlVec,
    InitialBelief,
    LinearDynamics,
    NoiseModel,
    StateVec,
    observe,
    sample_process_noise,
    step,
    symmetric_factor,
)
from navigation.terrain import TerrainMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParticleSet:
    """N weighted state hypotheses at step k."""

    particles: NDArray      # (N, 6)
    weights: NDArray        # (N,)
    k: int = 0

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])


def normalize(weights: NDArray) -> NDArray:
    total = np.sum(weights)
    if not np.isfinite(total) or total <= 0:
        raise DegenerateWeights(f"weights cannot be normalized (sum={total})")
    return weights / total


def uniform_weights(n: int) -> NDArray:
    return np.full(n, 1.0 / n)


# ────────────────────────────────────────────────────────────
# Filter operations
# ────────────────────────────────────────────────────────────


def init(belief: InitialBelief, n: int, rng: np.random.Generator) -> ParticleSet:
    """Draw n iid particles from N(m0, P0) with uniform weights."""
    if n < 1:
        raise BadCount(f"particle count must be >= 1, got {n}")
    L = symmetric_factor(belief.P0)
    particles = belief.m0 + rng.standard_normal((n, belief.m0.size)) @ L.T
    return ParticleSet(particles=particles, weights=uniform_weights(n), k=0)


def predict(
    pset: ParticleSet,
    dyn: LinearDynamics,
    u: ControlVec,
    nm: NoiseModel,
    rng: np.random.Generator,
) -> ParticleSet:
    """Advance every particle through the dynamics with its own noise draw."""
    xi = sample_process_noise(nm, rng, size=pset.size)
    return replace(pset, particles=step(dyn, pset.particles, u, xi), k=pset.k + 1)


def log_likelihood(pset: ParticleSet, z: float, terrain: TerrainMap, nm: NoiseModel) -> NDArray:
    innovation = z - observe(pset.particles, terrain, 0.0, clamp=True)
    return -0.5 * innovation ** 2 / nm.R


def update(pset: ParticleSet, z: float, terrain: TerrainMap, nm: NoiseModel) -> ParticleSet:
    """
    Re-weight particles by the Gaussian likelihood of observation z.

    Raises:
        DegenerateWeights: every posterior weight is zero or not finite.
    """
    with np.errstate(divide="ignore"):
        log_w = np.log(pset.weights) + log_likelihood(pset, z, terrain, nm)
    peak = np.max(log_w)
    if not np.isfinite(peak):
        raise DegenerateWeights(f"all particle likelihoods vanished at step {pset.k}")
    weights = np.exp(log_w - peak)
    return replace(pset, weights=normalize(weights))


def ess(pset: ParticleSet) -> float:
    """Effective sample size 1 / sum(w^2)."""
    return float(1.0 / np.sum(pset.weights ** 2))


def systematic_indexes(weights: NDArray, rng: np.random.Generator, n_out: Optional[int] = None) -> NDArray:
    """
    Systematic resampling: one uniform offset, n_out evenly spaced positions.

    Particle i is copied floor(n_out w_i) or ceil(n_out w_i) times; n_out defaults to len(weights).
    """
    n = weights.shape[0]
    n_out = n if n_out is None else n_out
    positions = (rng.random() + np.arange(n_out)) / n_out
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), n - 1)


def resample_systematic(pset: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    idx = systematic_indexes(pset.weights, rng)
    return replace(pset, particles=pset.particles[idx], weights=uniform_weights(pset.size))


def mean(pset: ParticleSet) -> StateVec:
    """Weighted mean, the conditional-expectation estimate of the state."""
    return pset.weights @ pset.particles


def top_k(pset: ParticleSet, n_s: int) -> ParticleSet:
    """The n_s highest-weight particles, renormalized; ties go to the lowest index."""
    if not 1 <= n_s <= pset.size:
        raise BadCount(f"n_s must be in [1, {pset.size}], got {n_s}")
    order = np.argsort(-pset.weights, kind="stable")[:n_s]
    return ParticleSet(
        particles=pset.particles[order],
        weights=normalize(pset.weights[order]),
        k=pset.k,
    )


# ────────────────────────────────────────────────────────────
# Snapshots
# ────────────────────────────────────────────────────────────


def snapshot_frame(snapshots: Iterable[ParticleSet]) -> pd.DataFrame:
    """Stack particle sets into rows `k,i,x1,x2,x3,v1,v2,v3,w`."""
    frames = []
    for pset in snapshots:
        frame = pd.DataFrame(pset.particles, columns=list(STATE_LABELS))
        frame.insert(0, "i", np.arange(pset.size))
        frame.insert(0, "k", pset.k)
        frame["w"] = pset.weights
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["k", "i", *STATE_LABELS, "w"])
    return pd.concat(frames, ignore_index=True)


def write_snapshots(snapshots: Iterable[ParticleSet], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    snapshot_frame(snapshots).to_csv(path, index=False, float_format="%.17g")
    logger.info("Wrote particle snapshots to %s", path)
    return path
