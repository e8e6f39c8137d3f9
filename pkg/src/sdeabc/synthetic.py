"""Gaussian synthetic-likelihood approximation of the importance ratio.

The importance weight of a data-conditionally simulated summary involves
the intractable densities of both the forward and the data-conditional
summary laws; each is replaced by a Gaussian fitted to P simulated
summaries. Degeneracy guards reject proposals whose backward summary
covariance is ill-conditioned and clip log-ratios that would exceed zero,
limiting the influence of any single particle on the weight normalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .lookahead import ParticleSystem
from .models import DegenerateCovarianceError, SdeModel, _LOG_2PI
from .smoother import BackwardConfig, DegenerateBackwardError, backward_sample_batch


@dataclass(frozen=True)
class GuardConfig:
    max_condition_number: float = 1e3
    clip_positive_log_ratio: bool = True

    def __post_init__(self):
        if not self.max_condition_number > 1:
            raise ValueError("max_condition_number must exceed 1")


@dataclass(frozen=True)
class SlEstimate:
    """Fitted summary Gaussians and the resulting log importance ratio.

    ``log_ratio`` is None when the proposal was rejected by a guard;
    a clipped ratio is -inf but not rejected.
    """

    fwd_mean: np.ndarray
    fwd_cov: np.ndarray
    bwd_mean: Optional[np.ndarray]
    bwd_cov: Optional[np.ndarray]
    log_ratio: Optional[float]
    reason: Optional[str] = None
    fwd_condition: float = np.nan
    bwd_condition: float = np.nan

    @property
    def rejected(self) -> bool:
        return self.log_ratio is None


def condition_number(cov: np.ndarray) -> float:
    """Ratio of the largest to smallest eigenvalue magnitude (inf when
    singular)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    eigs = np.abs(np.linalg.eigvalsh(cov))
    smallest = eigs.min()
    if smallest == 0.0:
        return np.inf
    return float(eigs.max() / smallest)


def _fit_gaussian(samples: np.ndarray):
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, dim = samples.shape
    if n < dim + 1:
        raise ValueError(f"need at least dim+1 = {dim + 1} samples, got {n}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (n - 1)
    return mean, cov


def _mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    try:
        chol = np.linalg.cholesky(np.atleast_2d(cov))
    except np.linalg.LinAlgError as err:
        raise DegenerateCovarianceError("singular empirical covariance") from err
    sol = np.linalg.solve(chol, x - mean)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (x.size * _LOG_2PI + logdet + sol @ sol))


def empirical_gaussian_logpdf(s: np.ndarray, samples: np.ndarray) -> float:
    """Log-density of ``s`` under the Gaussian with the sample mean and the
    unbiased sample covariance of ``samples``.

    Raises:
        DegenerateCovarianceError: if the sample covariance is singular.
        ValueError: with fewer than dim+1 samples.
    """
    mean, cov = _fit_gaussian(samples)
    return _mvn_logpdf(s, mean, cov)


def ratio_from_summary_sets(
    s_eval: np.ndarray,
    fwd_summaries: np.ndarray,
    bwd_summaries: np.ndarray,
    guards: Optional[GuardConfig] = None,
) -> SlEstimate:
    """Assemble the synthetic-likelihood ratio from simulated summary sets."""
    guards = guards or GuardConfig()
    s_eval = np.atleast_1d(np.asarray(s_eval, dtype=float))
    fwd_mean, fwd_cov = _fit_gaussian(fwd_summaries)
    bwd_mean, bwd_cov = _fit_gaussian(bwd_summaries)
    fwd_cond = condition_number(fwd_cov)
    bwd_cond = condition_number(bwd_cov)

    def _rejected(reason):
        return SlEstimate(
            fwd_mean, fwd_cov, bwd_mean, bwd_cov, None, reason, fwd_cond, bwd_cond
        )

    if not np.isfinite(bwd_cond) or bwd_cond > guards.max_condition_number:
        return _rejected("condition-number")
    try:
        log_fwd = _mvn_logpdf(s_eval, fwd_mean, fwd_cov)
    except DegenerateCovarianceError:
        return _rejected("forward-covariance")
    try:
        log_bwd = _mvn_logpdf(s_eval, bwd_mean, bwd_cov)
    except DegenerateCovarianceError:
        return _rejected("backward-covariance")
    log_ratio = log_fwd - log_bwd
    if not np.isfinite(log_ratio):
        return _rejected("non-finite-ratio")
    if guards.clip_positive_log_ratio and log_ratio > 0.0:
        log_ratio = -np.inf
    return SlEstimate(
        fwd_mean, fwd_cov, bwd_mean, bwd_cov, float(log_ratio), None, fwd_cond, bwd_cond
    )


def sl_log_ratio(
    system: ParticleSystem,
    model: SdeModel,
    theta: np.ndarray,
    s_eval: np.ndarray,
    summarize: Callable[[np.ndarray], np.ndarray],
    n_draws: Optional[int] = None,
    guards: Optional[GuardConfig] = None,
    backward_config: Optional[BackwardConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> SlEstimate:
    """Approximate log p(s|theta) - log p(s|theta, data) at ``s_eval``.

    The forward summary set comes from the genealogies already stored in
    ``system``; the data-conditional set is built by drawing ``n_draws``
    backward trajectories from that same fixed system (default: as many
    as there are particles).

    Args:
        summarize: batch summary map, (B, n+1, d) paths -> (B, q).
    """
    if rng is None:
        raise ValueError("sl_log_ratio requires an explicit rng")
    n_draws = n_draws or system.n_particles
    fwd_summaries = summarize(system.coarse_states())
    try:
        bwd_values, _ = backward_sample_batch(
            system, model, theta, backward_config, rng, count=n_draws
        )
    except DegenerateBackwardError:
        fwd_mean, fwd_cov = _fit_gaussian(fwd_summaries)
        return SlEstimate(
            fwd_mean,
            fwd_cov,
            None,
            None,
            None,
            "degenerate-backward",
            condition_number(fwd_cov),
            np.nan,
        )
    bwd_summaries = summarize(bwd_values)
    return ratio_from_summary_sets(s_eval, fwd_summaries, bwd_summaries, guards)
