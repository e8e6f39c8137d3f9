"""Backward-simulation smoother over a fixed lookahead particle system.

A trajectory is assembled by walking backward through the stored cloud:
draw the final particle from the last weight column, then repeatedly
reweight earlier columns by the EM transition density toward the state
already selected. States are always *selected* from the cloud, never
interpolated. The default stride steps directly between observation
times, which the experiments found gives the most consistent paths; the
fine stride retraces every integration step and is kept for the small
systems where the full recursion can be enumerated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .lookahead import ParticleSystem
from .models import SdeModel, Trajectory, em_mean_cov, gaussian_logpdf_graceful

_STRIDES = ("observation", "fine")


class DegenerateBackwardError(RuntimeError):
    """Every smoothing weight vanished while stepping backward."""


@dataclass(frozen=True)
class BackwardConfig:
    stride: str = "observation"

    def __post_init__(self):
        if self.stride not in _STRIDES:
            raise ValueError(f"unknown backward stride '{self.stride}'")


def _log_smoothing_matrix(
    log_weights: np.ndarray,
    states: np.ndarray,
    targets: np.ndarray,
    model: SdeModel,
    theta: np.ndarray,
    elapsed: float,
) -> np.ndarray:
    """Unnormalized log smoothing weights, shape (C, P), for C targets."""
    mean, cov = em_mean_cov(model, states, theta, elapsed)  # (P, d), (P, d, d)
    logpdf = gaussian_logpdf_graceful(targets[:, None, :], mean[None, :, :], cov[None, :, :])
    return log_weights[None, :] + logpdf


def smoothing_probs(
    norm_weights_at_k: np.ndarray,
    states_at_k: np.ndarray,
    target: np.ndarray,
    model: SdeModel,
    theta: np.ndarray,
    elapsed: float,
) -> np.ndarray:
    """Backward-kernel probabilities over the stored particles at one time.

    Probabilities are proportional to w_k^j * p_EM(target | x_k^j, theta),
    computed in log space.

    Raises:
        DegenerateBackwardError: if every term vanishes.
    """
    if elapsed <= 0:
        raise ValueError("elapsed must be positive")
    target = np.atleast_1d(np.asarray(target, dtype=float))
    if not np.all(np.isfinite(target)):
        raise ValueError("target state must be finite")
    states = np.asarray(states_at_k, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    with np.errstate(divide="ignore"):
        log_w = np.log(np.asarray(norm_weights_at_k, dtype=float))
    log_probs = _log_smoothing_matrix(log_w, states, target[None, :], model, theta, elapsed)[0]
    norm = logsumexp(log_probs)
    if not np.isfinite(norm):
        raise DegenerateBackwardError("all smoothing weights vanished")
    return np.exp(log_probs - norm)


def _categorical_rows(log_probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of an unnormalized log-probability matrix."""
    norms = logsumexp(log_probs, axis=1)
    if not np.all(np.isfinite(norms)):
        raise DegenerateBackwardError("all smoothing weights vanished")
    probs = np.exp(log_probs - norms[:, None])
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(log_probs.shape[0])
    return (cum > u[:, None]).argmax(axis=1)


def backward_sample_batch(
    system: ParticleSystem,
    model: SdeModel,
    theta: np.ndarray,
    config: Optional[BackwardConfig] = None,
    rng: Optional[np.random.Generator] = None,
    count: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` i.i.d. backward trajectories from one fixed system.

    Returns:
        values: selected coarse states including the shared initial state,
            shape (count, n+1, d).
        indices: selected particle indices at the observation times
            t_1..t_n (for the observation stride) or at every fine time
            (for the fine stride), shape (count, n) or (count, N).
    """
    if rng is None:
        raise ValueError("backward sampling requires an explicit rng")
    config = config or BackwardConfig()
    grid = system.grid
    theta = np.asarray(theta, dtype=float)

    if config.stride == "observation":
        step_index = grid.obs_index[1:]  # fine positions of t_1..t_n
        elapsed = np.diff(grid.obs_times)
    else:
        step_index = np.arange(1, grid.n_fine + 1)
        elapsed = grid.fine_steps

    n_steps = step_index.size
    # unnormalized log-weights are proportional to the normalized ones and
    # avoid an exp/log round trip
    log_w = system.log_weights

    indices = np.empty((count, n_steps), dtype=int)
    final_col = log_w[:, step_index[-1] - 1]
    norm = logsumexp(final_col)
    if not np.isfinite(norm):
        raise DegenerateBackwardError("terminal weights vanished")
    indices[:, -1] = _categorical_rows(np.tile(final_col, (count, 1)), rng)
    current = system.states[indices[:, -1], step_index[-1], :]

    for pos in range(n_steps - 2, -1, -1):
        k = step_index[pos]
        log_m = _log_smoothing_matrix(
            log_w[:, k - 1],
            system.states[:, k, :],
            current,
            model,
            theta,
            float(elapsed[pos + 1]),
        )
        indices[:, pos] = _categorical_rows(log_m, rng)
        current = system.states[indices[:, pos], k, :]

    if config.stride == "observation":
        coarse_idx = indices
    else:
        coarse_idx = indices[:, grid.obs_index[1:] - 1]
    gathered = system.states[coarse_idx, grid.obs_index[1:][None, :], :]
    x0 = np.broadcast_to(system.states[0, 0, :], (count, 1, system.states.shape[-1]))
    values = np.concatenate([x0, gathered], axis=1)
    return values, indices


def backward_sample(
    system: ParticleSystem,
    model: SdeModel,
    theta: np.ndarray,
    config: Optional[BackwardConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> Trajectory:
    """One data-conditional trajectory on the observation grid.

    The endpoint is drawn from the final weight column; earlier states are
    drawn from the approximate backward kernel; the shared initial state
    is prepended deterministically.
    """
    values, _ = backward_sample_batch(system, model, theta, config, rng, count=1)
    return Trajectory.coarse(system.grid, values[0])


def backward_path_log_prob(
    system: ParticleSystem,
    model: SdeModel,
    theta: np.ndarray,
    index_path: np.ndarray,
    config: Optional[BackwardConfig] = None,
) -> float:
    """Exact log-probability of one backward index path under the sampler.

    Mirrors the factorization used by ``backward_sample_batch``; mainly a
    brute-force enumeration aid for small systems.
    """
    config = config or BackwardConfig()
    grid = system.grid
    theta = np.asarray(theta, dtype=float)
    if config.stride == "observation":
        step_index = grid.obs_index[1:]
        elapsed = np.diff(grid.obs_times)
    else:
        step_index = np.arange(1, grid.n_fine + 1)
        elapsed = grid.fine_steps
    index_path = np.asarray(index_path, dtype=int)
    if index_path.size != step_index.size:
        raise ValueError("index path length does not match the stride")

    log_w = system.log_weights
    final_col = log_w[:, step_index[-1] - 1]
    total = float(final_col[index_path[-1]] - logsumexp(final_col))
    current = system.states[index_path[-1], step_index[-1], :]
    for pos in range(step_index.size - 2, -1, -1):
        k = step_index[pos]
        log_m = _log_smoothing_matrix(
            log_w[:, k - 1],
            system.states[:, k, :],
            current[None, :],
            model,
            theta,
            float(elapsed[pos + 1]),
        )[0]
        total += float(log_m[index_path[pos]] - logsumexp(log_m))
        current = system.states[index_path[pos], k, :]
    return total
