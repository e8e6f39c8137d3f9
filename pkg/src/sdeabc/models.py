"""SDE model definitions, numerical steppers and exact transition densities.

All drift/diffusion callables are vectorized: for a model with state
dimension ``d`` and noise dimension ``m``, ``drift(x, theta)`` maps an
array of shape ``(..., d)`` to ``(..., d)`` and ``diffusion(x, theta)``
maps it to ``(..., d, m)``. This makes particle propagation a sequence
of whole-cloud array operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln, ive

# States beyond this magnitude are treated as numerically exploded.
BLOWUP_LIMIT = 1e12

_LOG_2PI = float(np.log(2.0 * np.pi))


class SimulationError(RuntimeError):
    """A forward step produced a non-finite or exploded state."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = None if state is None else np.array(state, dtype=float)


class DegenerateCovarianceError(RuntimeError):
    """A covariance matrix required for a density evaluation is singular."""


@dataclass(frozen=True)
class PriorBox:
    """Independent uniform prior over a box."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("prior bounds must be 1-d vectors of equal length")
        if not np.all(np.isfinite(lower)) or not np.all(np.isfinite(upper)):
            raise ValueError("prior bounds must be finite")
        if not np.all(lower < upper):
            raise ValueError("each prior lower bound must be < its upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)

    def log_density(self, theta: np.ndarray) -> np.ndarray:
        log_vol = float(np.sum(np.log(self.widths)))
        inside = self.contains(theta)
        return np.where(inside, -log_vol, -np.inf)

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        if size is None:
            return rng.uniform(self.lower, self.upper)
        return rng.uniform(self.lower, self.upper, size=(size, self.dim))


@dataclass(frozen=True)
class SdeModel:
    """A time-homogeneous Ito diffusion with a uniform box prior.

    ``exact_transition(x_to, x_from, theta, elapsed)`` and
    ``exact_sample(x_from, theta, elapsed, rng)`` are present only for
    models with a tractable transition law.
    """

    name: str
    state_dim: int
    noise_dim: int
    drift: Callable
    diffusion: Callable
    prior: PriorBox
    param_names: tuple
    default_x0: np.ndarray
    state_floor: Optional[float] = None
    exact_transition: Optional[Callable] = None
    exact_sample: Optional[Callable] = None
    diffusion_deriv: Optional[Callable] = None

    def __post_init__(self):
        object.__setattr__(
            self, "default_x0", np.atleast_1d(np.asarray(self.default_x0, dtype=float))
        )
        if self.default_x0.size != self.state_dim:
            raise ValueError("default_x0 dimension does not match state_dim")

    @property
    def param_dim(self) -> int:
        return self.prior.dim


class TimeGrid:
    """Observation times plus the fine integration grid between them.

    Fine times are computed by index, ``tau = t_i + k * (t_{i+1} - t_i) / A_i``,
    so observation times are hit exactly rather than accumulated to.
    """

    def __init__(self, obs_times: Sequence[float], subintervals):
        obs_times = np.asarray(obs_times, dtype=float)
        if obs_times.ndim != 1 or obs_times.size < 2:
            raise ValueError("obs_times must contain at least two time points")
        if not np.all(np.diff(obs_times) > 0):
            raise ValueError("obs_times must be strictly increasing")
        n = obs_times.size - 1
        if np.isscalar(subintervals):
            subs = np.full(n, int(subintervals), dtype=int)
        else:
            subs = np.asarray(subintervals, dtype=int)
            if subs.shape != (n,):
                raise ValueError("need one subinterval count per observation interval")
        if np.any(subs < 2):
            raise ValueError("subintervals must be >= 2")

        self.obs_times = obs_times
        self.subintervals = subs
        # obs_index[i] is the position of t_i on the fine grid.
        self.obs_index = np.concatenate([[0], np.cumsum(subs)])
        fine = np.empty(self.obs_index[-1] + 1)
        steps = np.empty(self.obs_index[-1])
        for i in range(n):
            a = int(subs[i])
            h_i = (obs_times[i + 1] - obs_times[i]) / a
            k0 = self.obs_index[i]
            fine[k0 : k0 + a] = obs_times[i] + h_i * np.arange(a)
            fine[k0 + a] = obs_times[i + 1]
            steps[k0 : k0 + a] = h_i
        self.fine_times = fine
        self.fine_steps = steps

    @classmethod
    def regular(cls, n: int, delta: float, subintervals: int, t0: float = 0.0) -> "TimeGrid":
        return cls(t0 + delta * np.arange(n + 1), subintervals)

    @property
    def n_obs(self) -> int:
        """Number of observation intervals (n)."""
        return self.obs_times.size - 1

    @property
    def n_fine(self) -> int:
        """Number of fine steps (N)."""
        return int(self.obs_index[-1])

    @property
    def is_regular(self) -> bool:
        deltas = np.diff(self.obs_times)
        return bool(
            np.allclose(deltas, deltas[0]) and np.all(self.subintervals == self.subintervals[0])
        )

    @property
    def delta(self) -> float:
        deltas = np.diff(self.obs_times)
        if not np.allclose(deltas, deltas[0]):
            raise ValueError("delta is only defined for regular grids")
        return float(deltas[0])

    @property
    def h(self) -> float:
        if not self.is_regular:
            raise ValueError("h is only defined for regular grids")
        return float(self.fine_steps[0])

    def downsample(self, fine_values: np.ndarray) -> np.ndarray:
        """Restrict values on the fine grid to the observation times."""
        return np.asarray(fine_values)[..., self.obs_index, :]


@dataclass(frozen=True)
class Trajectory:
    """State values on either the coarse (observation) or fine grid."""

    times: np.ndarray
    values: np.ndarray
    kind: str

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if self.kind not in ("coarse", "fine"):
            raise ValueError("trajectory kind must be 'coarse' or 'fine'")
        if values.shape[0] != times.size:
            raise ValueError("trajectory values and times have mismatched lengths")
        if not np.all(np.isfinite(values)):
            raise ValueError("trajectory contains non-finite values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def state_dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def fine(cls, grid: TimeGrid, values: np.ndarray) -> "Trajectory":
        if np.asarray(values).shape[0] != grid.n_fine + 1:
            raise ValueError("fine trajectory must have N+1 rows")
        return cls(grid.fine_times, values, "fine")

    @classmethod
    def coarse(cls, grid: TimeGrid, values: np.ndarray) -> "Trajectory":
        if np.asarray(values).shape[0] != grid.n_obs + 1:
            raise ValueError("coarse trajectory must have n+1 rows")
        return cls(grid.obs_times, values, "coarse")

    def downsampled(self, grid: TimeGrid) -> "Trajectory":
        if self.kind != "fine":
            raise ValueError("can only downsample a fine trajectory")
        return Trajectory.coarse(grid, self.values[grid.obs_index])


def _check_finite_coeffs(model: SdeModel, x, mu, sig) -> None:
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sig))):
        bad = ~(np.all(np.isfinite(mu), axis=-1) & np.all(np.isfinite(sig), axis=(-2, -1)))
        state = np.asarray(x)[bad][0] if np.asarray(x).ndim > 1 else np.asarray(x)
        raise SimulationError(f"non-finite drift/diffusion for model '{model.name}'", state)


def apply_diffusion(sig: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Contract a (..., d, m) diffusion matrix with a (..., m) noise vector.

    Uses an explicit multiply-and-sum so batched and single-path calls
    reduce in the same order and agree bit for bit.
    """
    return (sig * z[..., None, :]).sum(axis=-1)


def em_step(model: SdeModel, x: np.ndarray, theta: np.ndarray, h: float, z: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step x + mu*h + sigma*(sqrt(h)*z).

    Args:
        x: states, shape (..., d).
        z: standard normal draws, shape (..., m).

    Raises:
        SimulationError: on non-finite drift/diffusion or exploded states.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    mu = model.drift(x, theta)
    sig = model.diffusion(x, theta)
    _check_finite_coeffs(model, x, mu, sig)
    out = x + mu * h + apply_diffusion(sig, z) * np.sqrt(h)
    if model.state_floor is not None:
        out = np.maximum(out, model.state_floor)
    if not np.all(np.abs(out) < BLOWUP_LIMIT):
        bad = ~np.all(np.abs(out) < BLOWUP_LIMIT, axis=-1)
        raise SimulationError(
            f"state exploded during simulation of model '{model.name}'", out[bad][0] if out.ndim > 1 else out
        )
    return out


def milstein_step(model: SdeModel, x: np.ndarray, theta: np.ndarray, h: float, z: np.ndarray) -> np.ndarray:
    """Milstein step for scalar-state, scalar-noise models.

    Adds 0.5 * sigma * sigma' * ((sqrt(h) z)^2 - h) to the EM update. The
    diffusion state-derivative comes from the model when registered and a
    central finite difference (step 1e-6) otherwise.
    """
    if model.state_dim != 1 or model.noise_dim != 1:
        raise ValueError("milstein_step requires state_dim == noise_dim == 1")
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    sig = model.diffusion(x, theta)[..., 0, 0]
    if model.diffusion_deriv is not None:
        dsig = model.diffusion_deriv(x, theta)[..., 0]
    else:
        eps = 1e-6
        dsig = (
            model.diffusion(x + eps, theta)[..., 0, 0] - model.diffusion(x - eps, theta)[..., 0, 0]
        ) / (2 * eps)
    base = em_step(model, x, theta, h, z)
    dw = np.sqrt(h) * z[..., 0]
    out = base + (0.5 * sig * dsig * (dw**2 - h))[..., None]
    if model.state_floor is not None:
        out = np.maximum(out, model.state_floor)
    return out


_STEPPERS = {"em": em_step, "milstein": milstein_step}


def _propagate(
    model: SdeModel,
    theta: np.ndarray,
    x0: np.ndarray,
    noise: np.ndarray,
    h_steps: np.ndarray,
    scheme: str = "em",
) -> np.ndarray:
    """Iterate a stepper over pre-drawn noise.

    Args:
        x0: initial states, shape (B, d).
        noise: standard normals, shape (B, N, m).
        h_steps: step sizes, shape (N,).

    Returns:
        states of shape (B, N + 1, d).
    """
    step = _STEPPERS[scheme]
    n_steps = h_steps.size
    batch = x0.shape[0]
    out = np.empty((batch, n_steps + 1, model.state_dim))
    out[:, 0, :] = x0
    x = x0
    for k in range(n_steps):
        x = step(model, x, theta, h_steps[k], noise[:, k, :])
        out[:, k + 1, :] = x
    return out


def simulate_forward(
    model: SdeModel,
    theta: np.ndarray,
    grid: TimeGrid,
    x0: np.ndarray,
    scheme: str = "em",
    rng: Optional[np.random.Generator] = None,
) -> Trajectory:
    """Simulate one path on the fine grid; deterministic given the rng state.

    The full (N, m) noise block is drawn from ``rng`` in a single call, so
    a particle cloud built from per-particle generators reproduces each
    path exactly.
    """
    if rng is None:
        raise ValueError("simulate_forward requires an explicit rng")
    if scheme not in _STEPPERS:
        raise ValueError(f"unknown scheme '{scheme}'")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    noise = rng.standard_normal((grid.n_fine, model.noise_dim))
    states = _propagate(model, theta, x0[None, :], noise[None], grid.fine_steps, scheme)
    return Trajectory.fine(grid, states[0])


def generate_observation(
    model: SdeModel,
    theta: np.ndarray,
    fine_dt: float,
    thin: int,
    horizon: float,
    rng: np.random.Generator,
    x0: Optional[np.ndarray] = None,
    scheme: str = "em",
) -> Trajectory:
    """EM-simulate at fine_dt over [0, horizon], keep every thin-th point.

    The initial state is always retained, so the result has
    horizon/(fine_dt*thin) + 1 rows.
    """
    n_fine = int(round(horizon / fine_dt))
    if abs(n_fine * fine_dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a multiple of fine_dt")
    if thin < 1 or n_fine % thin != 0:
        raise ValueError("horizon/fine_dt must be divisible by thin")
    x0 = model.default_x0 if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    noise = rng.standard_normal((n_fine, model.noise_dim))
    states = _propagate(
        model, theta, x0[None, :], noise[None], np.full(n_fine, float(fine_dt)), scheme
    )[0]
    kept = states[::thin]
    times = fine_dt * thin * np.arange(kept.shape[0])
    return Trajectory(times, kept, "coarse")


def exact_observation(
    model: SdeModel,
    theta: np.ndarray,
    delta: float,
    n: int,
    rng: np.random.Generator,
    x0: Optional[np.ndarray] = None,
) -> Trajectory:
    """Sample n transitions from the model's exact transition law."""
    if model.exact_sample is None:
        raise ValueError(f"model '{model.name}' has no exact transition sampler")
    x0 = model.default_x0 if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    values = np.empty((n + 1, model.state_dim))
    values[0] = x0
    for i in range(n):
        values[i + 1] = model.exact_sample(values[i], theta, delta, rng)
    return Trajectory(delta * np.arange(n + 1), values, "coarse")


# --- Gaussian transition densities -----------------------------------------


def gaussian_logpdf_1d(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def _gaussian_logpdf_dirac_1d(x, mean, var):
    """1-d Gaussian log-density; a zero-variance kernel scores 0 at its mean
    and -inf elsewhere (Dirac convention, keeps sigma = 0 models symmetric)."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    positive = var > 0
    safe_var = np.where(positive, var, 1.0)
    dense = gaussian_logpdf_1d(x, mean, safe_var)
    point = np.where(x == mean, 0.0, -np.inf)
    return np.where(positive, dense, point)


def _gaussian_logpdf_full(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Multivariate normal log-density, batched over leading axes.

    Raises:
        DegenerateCovarianceError: if any covariance in the batch is singular.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise DegenerateCovarianceError("singular covariance in Gaussian density") from err
    diff = (x - mean)[..., :, None]
    sol = np.linalg.solve(chol, diff)[..., 0]
    quad = np.sum(sol**2, axis=-1)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * (d * _LOG_2PI + logdet + quad)


def em_mean_cov(model: SdeModel, x_from: np.ndarray, theta: np.ndarray, elapsed: float):
    """Mean and covariance of the one-step EM Gaussian transition."""
    x_from = np.asarray(x_from, dtype=float)
    mu = model.drift(x_from, theta)
    sig = model.diffusion(x_from, theta)
    mean = x_from + mu * elapsed
    cov = np.einsum("...ij,...kj->...ik", sig, sig) * elapsed
    return mean, cov


def em_transition_logpdf(
    model: SdeModel,
    x_to: np.ndarray,
    x_from: np.ndarray,
    theta: np.ndarray,
    elapsed: float,
) -> np.ndarray:
    """Log-density of the EM-induced Gaussian transition over ``elapsed``.

    Raises:
        DegenerateCovarianceError: if the diffusion covariance is singular;
            callers decide on a fallback.
    """
    if elapsed <= 0:
        raise ValueError("elapsed must be positive")
    x_to = np.atleast_1d(np.asarray(x_to, dtype=float))
    x_from = np.atleast_1d(np.asarray(x_from, dtype=float))
    mean, cov = em_mean_cov(model, x_from, theta, elapsed)
    if model.state_dim == 1:
        var = cov[..., 0, 0]
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise DegenerateCovarianceError("singular covariance in EM transition")
        return gaussian_logpdf_1d(x_to[..., 0], mean[..., 0], var)
    return _gaussian_logpdf_full(x_to, mean, cov)


def gaussian_logpdf_graceful(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Gaussian log-density that tolerates singular covariances elementwise.

    A singular kernel scores 0 exactly at its mean and -inf elsewhere (the
    Dirac convention used throughout the lookahead/smoothing weights).
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    d = x.shape[-1]
    if d == 1:
        return _gaussian_logpdf_dirac_1d(x[..., 0], mean[..., 0], np.asarray(cov)[..., 0, 0])
    x, mean = np.broadcast_arrays(x, mean)
    cov = np.broadcast_to(cov, x.shape + (d,))
    batch_shape = x.shape[:-1]
    x = x.reshape(-1, d)
    mean = mean.reshape(-1, d)
    cov = cov.reshape(-1, d, d)
    eigs = np.linalg.eigvalsh(cov)
    ok = eigs[:, 0] > np.maximum(eigs[:, -1], 0.0) * 1e-12
    out = np.where(np.all(x == mean, axis=-1), 0.0, -np.inf)
    if np.any(ok):
        out[ok] = _gaussian_logpdf_full(x[ok], mean[ok], cov[ok])
    return out.reshape(batch_shape)


def em_transition_logpdf_graceful(
    model: SdeModel,
    x_to: np.ndarray,
    x_from: np.ndarray,
    theta: np.ndarray,
    elapsed: float,
) -> np.ndarray:
    """Like em_transition_logpdf but maps singular covariances to the Dirac
    convention instead of raising; used inside smoothing weights."""
    x_to = np.atleast_1d(np.asarray(x_to, dtype=float))
    x_from = np.atleast_1d(np.asarray(x_from, dtype=float))
    mean, cov = em_mean_cov(model, x_from, theta, elapsed)
    return gaussian_logpdf_graceful(x_to, mean, cov)


# --- Exact transitions ------------------------------------------------------


def ou_exact_transition_logpdf(x_to, x_from, theta, elapsed: float):
    """Ornstein-Uhlenbeck transition: Gaussian with mean
    alpha + (x_from - alpha) e^{-beta u} and variance
    sigma^2 (1 - e^{-2 beta u}) / (2 beta)."""
    alpha, beta, sigma = (float(v) for v in np.asarray(theta, dtype=float)[:3])
    if beta <= 0 or sigma <= 0 or elapsed <= 0:
        raise ValueError("ou_exact_transition_logpdf requires beta, sigma, elapsed > 0")
    x_to = np.squeeze(np.asarray(x_to, dtype=float))
    x_from = np.squeeze(np.asarray(x_from, dtype=float))
    decay = np.exp(-beta * elapsed)
    mean = alpha + (x_from - alpha) * decay
    var = sigma**2 * (1.0 - decay**2) / (2.0 * beta)
    return gaussian_logpdf_1d(x_to, mean, var)


def _ou_exact_sample(x_from, theta, elapsed, rng):
    alpha, beta, sigma = np.asarray(theta, dtype=float)[:3]
    decay = np.exp(-beta * elapsed)
    mean = alpha + (np.asarray(x_from, dtype=float) - alpha) * decay
    sd = np.sqrt(sigma**2 * (1.0 - decay**2) / (2.0 * beta))
    return mean + sd * rng.standard_normal(mean.shape)


def cir_exact_transition_logpdf(x_to, x_from, theta, elapsed: float):
    """Cox-Ingersoll-Ross transition density, evaluated in log scale.

    For dX = beta (alpha - X) dt + sigma sqrt(X) dB:
        c = 2 beta / (sigma^2 (1 - e^{-beta u})),  q = 2 alpha beta / sigma^2 - 1,
        u = c x_from e^{-beta u},  v = c x_to,
        p = c e^{-u-v} (v/u)^{q/2} I_q(2 sqrt(uv)).

    The Bessel factor uses the exponentially scaled I_q to avoid overflow,
    with a leading-order series fallback where the scaled value underflows.
    """
    alpha, beta, sigma = (float(v) for v in np.asarray(theta, dtype=float)[:3])
    if beta <= 0 or sigma <= 0 or elapsed <= 0:
        raise ValueError("cir_exact_transition_logpdf requires beta, sigma, elapsed > 0")
    x_to = np.squeeze(np.asarray(x_to, dtype=float))
    x_from = np.squeeze(np.asarray(x_from, dtype=float))
    if np.any(x_to <= 0) or np.any(x_from <= 0):
        raise ValueError("CIR transition density requires positive states")
    c = 2.0 * beta / (sigma**2 * (1.0 - np.exp(-beta * elapsed)))
    q = 2.0 * alpha * beta / sigma**2 - 1.0
    u = c * x_from * np.exp(-beta * elapsed)
    v = c * x_to
    z = 2.0 * np.sqrt(u * v)
    scaled = ive(q, z)
    with np.errstate(divide="ignore"):
        log_bessel = np.where(
            scaled > 0,
            np.log(np.where(scaled > 0, scaled, 1.0)) + z,
            # I_q(z) ~ (z/2)^q / Gamma(q+1) for small scaled values
            q * np.log(z / 2.0) - gammaln(q + 1.0),
        )
    return np.log(c) - u - v + 0.5 * q * (np.log(v) - np.log(u)) + log_bessel


def _cir_exact_sample(x_from, theta, elapsed, rng):
    alpha, beta, sigma = np.asarray(theta, dtype=float)[:3]
    c = 2.0 * beta / (sigma**2 * (1.0 - np.exp(-beta * elapsed)))
    df = 4.0 * alpha * beta / sigma**2
    nonc = 2.0 * c * np.asarray(x_from, dtype=float) * np.exp(-beta * elapsed)
    draw = np.where(
        nonc > 0,
        rng.noncentral_chisquare(df, np.maximum(nonc, 1e-300)),
        rng.chisquare(df, size=np.shape(nonc)),
    )
    return draw / (2.0 * c)


# --- Model registry ---------------------------------------------------------


# Model coefficient functions work on state components (x[..., i]) so that
# theta entries may be scalars or per-path vectors of the batch length.


def _ckls_drift(x, theta):
    alpha, beta = theta[0], theta[1]
    return (beta * (alpha - np.asarray(x, dtype=float)[..., 0]))[..., None]


def _ou_diffusion(x, theta):
    out = np.empty(np.shape(x) + (1,))
    out[..., 0, 0] = theta[2]
    return out


def _ou_diffusion_deriv(x, theta):
    return np.zeros(np.shape(x))


def _ckls_diffusion(x, theta, gamma=None):
    sigma = theta[2]
    g = theta[3] if gamma is None else gamma
    return (sigma * np.asarray(x, dtype=float)[..., 0] ** g)[..., None, None]


def _ckls_diffusion_deriv(x, theta, gamma=None):
    sigma = theta[2]
    g = theta[3] if gamma is None else gamma
    return (sigma * g * np.asarray(x, dtype=float)[..., 0] ** (g - 1.0))[..., None]


def _nonlinear_drift(x, theta):
    alpha, beta = theta[0], theta[1]
    x0 = np.asarray(x, dtype=float)[..., 0]
    return (beta * alpha - beta * x0 + np.sqrt(np.clip(x0, 0.0, None)))[..., None]


def _sqrt_diffusion(x, theta):
    sigma = theta[2]
    x0 = np.asarray(x, dtype=float)[..., 0]
    return (sigma * np.sqrt(np.clip(x0, 0.0, None)))[..., None, None]


def _sqrt_diffusion_deriv(x, theta):
    sigma = theta[2]
    x0 = np.clip(np.asarray(x, dtype=float)[..., 0], 1e-12, None)
    return (sigma / (2.0 * np.sqrt(x0)))[..., None]


def _lv_drift(x, theta):
    t1, t2, t3 = theta[0], theta[1], theta[2]
    xp = np.clip(np.asarray(x, dtype=float), 0.0, None)
    prey, pred = xp[..., 0], xp[..., 1]
    out = np.empty_like(xp)
    out[..., 0] = t1 * prey - t2 * prey * pred
    out[..., 1] = t2 * prey * pred - t3 * pred
    return out


def _lv_diffusion(x, theta):
    t1, t2, t3 = theta[0], theta[1], theta[2]
    xp = np.clip(np.asarray(x, dtype=float), 0.0, None)
    prey, pred = xp[..., 0], xp[..., 1]
    out = np.zeros(xp.shape[:-1] + (2, 3))
    out[..., 0, 0] = np.sqrt(t1 * prey)
    out[..., 0, 1] = -np.sqrt(t2 * prey * pred)
    out[..., 1, 1] = np.sqrt(t2 * prey * pred)
    out[..., 1, 2] = -np.sqrt(t3 * pred)
    return out


def _schlogl_hazards(x, theta, rate3, pool_a, pool_b):
    t1, t2, t4 = theta[0], theta[1], theta[2]
    xv = np.clip(np.asarray(x, dtype=float)[..., 0], 0.0, None)
    a1 = t1 * pool_a * xv * (xv - 1.0) / 2.0
    a2 = t2 * xv * (xv - 1.0) * (xv - 2.0) / 6.0
    a3 = rate3 * pool_b * np.ones_like(xv)
    a4 = t4 * xv
    return a1, a2, a3, a4


def _schlogl_drift(x, theta, rate3=1e-3, pool_a=1e5, pool_b=2e5):
    a1, a2, a3, a4 = _schlogl_hazards(x, theta, rate3, pool_a, pool_b)
    return (a1 - a2 + a3 - a4)[..., None]


def _schlogl_diffusion(x, theta, rate3=1e-3, pool_a=1e5, pool_b=2e5):
    a1, a2, a3, a4 = _schlogl_hazards(x, theta, rate3, pool_a, pool_b)
    out = np.empty(np.shape(x)[:-1] + (1, 4))
    # negative hazards (possible for 0 < X < 2) are clamped before the sqrt
    out[..., 0, 0] = np.sqrt(np.clip(a1, 0.0, None))
    out[..., 0, 1] = -np.sqrt(np.clip(a2, 0.0, None))
    out[..., 0, 2] = np.sqrt(np.clip(a3, 0.0, None))
    out[..., 0, 3] = -np.sqrt(np.clip(a4, 0.0, None))
    return out


def ornstein_uhlenbeck() -> SdeModel:
    """CKLS with gamma = 0: dX = beta (alpha - X) dt + sigma dB."""
    return SdeModel(
        name="ou",
        state_dim=1,
        noise_dim=1,
        drift=_ckls_drift,
        diffusion=_ou_diffusion,
        prior=PriorBox([0.0, 0.0, 0.0], [30.0, 10.0, 2.0]),
        param_names=("alpha", "beta", "sigma"),
        default_x0=[0.01],
        state_floor=None,
        exact_transition=ou_exact_transition_logpdf,
        exact_sample=_ou_exact_sample,
        diffusion_deriv=_ou_diffusion_deriv,
    )


def cox_ingersoll_ross() -> SdeModel:
    """CKLS with gamma = 1/2: dX = beta (alpha - X) dt + sigma sqrt(X) dB."""
    return SdeModel(
        name="cir",
        state_dim=1,
        noise_dim=1,
        drift=_ckls_drift,
        diffusion=_sqrt_diffusion,
        prior=PriorBox([0.0, 0.0, 0.0], [20.0, 10.0, 3.0]),
        param_names=("alpha", "beta", "sigma"),
        default_x0=[1.0],
        state_floor=1e-6,
        exact_transition=cir_exact_transition_logpdf,
        exact_sample=_cir_exact_sample,
        diffusion_deriv=_sqrt_diffusion_deriv,
    )


def ckls() -> SdeModel:
    """Full CKLS family: dX = beta (alpha - X) dt + sigma X^gamma dB."""
    return SdeModel(
        name="ckls",
        state_dim=1,
        noise_dim=1,
        drift=_ckls_drift,
        diffusion=_ckls_diffusion,
        prior=PriorBox([0.0, 0.0, 0.0, 0.0], [40.0, 10.0, 2.0, 1.0]),
        param_names=("alpha", "beta", "sigma", "gamma"),
        default_x0=[0.1],
        state_floor=1e-6,
        diffusion_deriv=_ckls_diffusion_deriv,
    )


def nonlinear_drift() -> SdeModel:
    """dX = (beta alpha - beta X + sqrt(X)) dt + sigma sqrt(X) dB."""
    return SdeModel(
        name="nonlinear",
        state_dim=1,
        noise_dim=1,
        drift=_nonlinear_drift,
        diffusion=_sqrt_diffusion,
        prior=PriorBox([0.0, 0.0, 0.0], [30.0, 10.0, 2.0]),
        param_names=("alpha", "beta", "sigma"),
        default_x0=[0.1],
        state_floor=1e-6,
        diffusion_deriv=_sqrt_diffusion_deriv,
    )


def lotka_volterra() -> SdeModel:
    """Chemical-Langevin predator/prey system with three reactions."""
    return SdeModel(
        name="lotka-volterra",
        state_dim=2,
        noise_dim=3,
        drift=_lv_drift,
        diffusion=_lv_diffusion,
        prior=PriorBox([0.0, 0.0, 0.0], [1.0, 0.05, 1.0]),
        param_names=("theta1", "theta2", "theta3"),
        default_x0=[100.0, 100.0],
        state_floor=0.0,
    )


def schlogl(rate3: float = 1e-3) -> SdeModel:
    """Bistable Schlogl system; species pools A = 1e5 and B = 2e5 are fixed,
    as is the third rate constant, so the free parameters are
    (theta1, theta2, theta4)."""
    return SdeModel(
        name="schlogl",
        state_dim=1,
        noise_dim=4,
        drift=partial(_schlogl_drift, rate3=rate3),
        diffusion=partial(_schlogl_diffusion, rate3=rate3),
        prior=PriorBox([1.6e-7, 0.0, 1.0], [4e-6, 5e-4, 8.0]),
        param_names=("theta1", "theta2", "theta4"),
        default_x0=[249.0],
        state_floor=0.0,
    )


MODEL_FACTORIES = {
    "ou": ornstein_uhlenbeck,
    "cir": cox_ingersoll_ross,
    "ckls": ckls,
    "nonlinear": nonlinear_drift,
    "lotka-volterra": lotka_volterra,
    "lv": lotka_volterra,
    "schlogl": schlogl,
}


def get_model(name: str) -> SdeModel:
    try:
        factory = MODEL_FACTORIES[name]
    except KeyError:
        known = ", ".join(sorted(set(MODEL_FACTORIES)))
        raise ValueError(f"unknown model '{name}' (known: {known})") from None
    return factory()
