"""ABC sequential Monte Carlo with forward or data-conditional simulation.

One driver implements both samplers. Every proposal attempt owns an rng
spawned from the round generator in attempt order and is committed in
attempt order, so results are identical whether attempts are evaluated
inline or by a worker pool. Round 1 accepts everything (infinite
threshold); later thresholds are quantiles of the previous round's
accepted distances. In data-conditional mode each accepted particle is
weighted by the synthetic-likelihood ratio from its own particle system,
and the forward trajectory closest to the data is banked for retraining
the summary network at the next round boundary.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .lookahead import (
    DegenerateSystemError,
    WeightingSpec,
    default_weighting,
    run_lookahead_sis,
    select_representative_forward,
)
from .models import (
    PriorBox,
    SdeModel,
    SimulationError,
    TimeGrid,
    Trajectory,
    _propagate,
    simulate_forward,
)
from .smoother import BackwardConfig, DegenerateBackwardError, backward_sample_batch
from .summaries import (
    PenNetwork,
    PenSummarizer,
    PluginSummarizer,
    TrainConfig,
    TrainingSet,
    TrainTrace,
    stability_stopping,
    train,
)
from .synthetic import GuardConfig, SlEstimate, sl_log_ratio


@dataclass(frozen=True)
class SmcConfig:
    """Sampler settings; defaults follow the reference experiment scale."""

    n_particles: int = 10000
    max_rounds: int = 10
    alpha: float = 0.5
    sim_particles: int = 30
    subintervals: int = 10
    stop_acceptance: float = 0.015
    budget_factor: float = 200.0
    mode: str = "forward"
    scheme: str = "em"
    backward_stride: str = "observation"
    weighting: Optional[WeightingSpec] = None
    guards: GuardConfig = field(default_factory=GuardConfig)
    max_proposal_retries: int = 100

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two parameter particles")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie strictly between 0 and 1")
        if self.mode not in ("forward", "dc"):
            raise ValueError("mode must be 'forward' or 'dc'")
        if self.sim_particles < 1:
            raise ValueError("sim_particles must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.budget_factor <= 0:
            raise ValueError("budget_factor must be positive")
        if not 0 <= self.stop_acceptance < 1:
            raise ValueError("stop_acceptance must lie in [0, 1)")


@dataclass(frozen=True)
class Population:
    """One round's weighted parameter particles."""

    particles: np.ndarray
    log_weights: np.ndarray
    distances: np.ndarray
    threshold: float
    perturb_cov: np.ndarray
    round_index: int

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def size(self) -> int:
        return self.particles.shape[0]


@dataclass
class RoundRecord:
    round_index: int
    epsilon: float
    accepted: int
    n_proposals: int
    n_simulations: int
    n_sl_rejected: int
    n_proposal_failures: int
    acceptance_rate: float
    ess: float
    retrained: bool
    frozen: bool
    train_seconds: float
    wall_seconds: float
    cumulative_seconds: float


@dataclass
class RunResult:
    populations: List[Population]
    records: List[RoundRecord]
    status: str  # completed | stopped-acceptance | budget | degenerate-weights

    def run_log(self) -> dict:
        return {
            "status": self.status,
            "rounds": [
                {
                    "round": r.round_index,
                    "epsilon": None if np.isinf(r.epsilon) else r.epsilon,
                    "accepted": r.accepted,
                    "proposals": r.n_proposals,
                    "simulations": r.n_simulations,
                    "sl_rejected": r.n_sl_rejected,
                    "proposal_failures": r.n_proposal_failures,
                    "acceptance_rate": r.acceptance_rate,
                    "ess": r.ess,
                    "retrained": r.retrained,
                    "frozen": r.frozen,
                    "train_seconds": r.train_seconds,
                    "wall_seconds": r.wall_seconds,
                    "cumulative_seconds": r.cumulative_seconds,
                }
                for r in self.records
            ],
        }


# -- elementary sampler operations --------------------------------------------


def perturb_cov(particles: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Twice the weighted sample covariance, jittered if not positive
    definite."""
    particles = np.asarray(particles, dtype=float)
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    mean = weights @ particles
    centered = particles - mean
    cov = 2.0 * (centered * weights[:, None]).T @ centered
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cov = cov + 1e-10 * np.eye(cov.shape[0])
    return cov


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """A factor L with L L^T = cov; tolerates semidefinite input."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eigval, eigvec = np.linalg.eigh(cov)
        return eigvec * np.sqrt(np.clip(eigval, 0.0, None))


def propose(
    particles: np.ndarray,
    weights: np.ndarray,
    cov: np.ndarray,
    prior: PriorBox,
    rng: np.random.Generator,
    max_retries: int = 100,
) -> Optional[np.ndarray]:
    """Multinomial pick plus Gaussian perturbation, redrawn until inside the
    prior box; None after the retry budget (a counted proposal failure)."""
    factor = _psd_factor(cov)
    for _ in range(max_retries):
        pick = particles[rng.choice(particles.shape[0], p=weights)]
        theta = pick + factor @ rng.standard_normal(particles.shape[1])
        if prior.contains(theta):
            return theta
    return None


def adaptive_threshold(accepted_distances: np.ndarray, alpha: float) -> float:
    """Nearest-rank alpha-quantile (1-based index ceil(alpha * K))."""
    distances = np.sort(np.asarray(accepted_distances, dtype=float))
    if distances.size == 0:
        raise ValueError("no accepted distances")
    rank = int(np.ceil(alpha * distances.size))
    return float(distances[max(rank, 1) - 1])


def _chol_with_jitter(cov: np.ndarray) -> np.ndarray:
    jitter = 0.0
    for _ in range(8):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else 10.0 * jitter
    raise np.linalg.LinAlgError("covariance cannot be factored")


def _log_mixture(theta, particles, log_weights, cov) -> float:
    """Log of the weighted Gaussian-kernel mixture over a population."""
    chol = _chol_with_jitter(cov)
    diff = theta - particles
    sol = np.linalg.solve(chol, diff.T)
    quad = np.sum(sol**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    p = particles.shape[1]
    log_kernel = -0.5 * (p * np.log(2 * np.pi) + logdet + quad)
    return float(logsumexp(log_weights + log_kernel))


def smc_weight_forward(
    theta: np.ndarray,
    prev: Optional[Population],
    prior: PriorBox,
) -> float:
    """log prior minus log perturbation-mixture; round 1 is prior-uniform."""
    log_prior = float(prior.log_density(theta))
    if prev is None:
        return log_prior
    return log_prior - _log_mixture(theta, prev.particles, prev.log_weights, prev.perturb_cov)


def smc_weight_dc(
    theta: np.ndarray,
    prev: Optional[Population],
    prior: PriorBox,
    sl: SlEstimate,
) -> float:
    """Forward weight plus the synthetic-likelihood log-ratio; a rejected
    estimate maps to -inf (the driver re-proposes such particles)."""
    if sl.rejected:
        return -np.inf
    return smc_weight_forward(theta, prev, prior) + sl.log_ratio


# -- summary management --------------------------------------------------------


class SummaryManager:
    """Owns the summary function, the training dataset and the retraining
    policy across rounds."""

    def __init__(
        self,
        kind: str,
        net: Optional[PenNetwork] = None,
        plugin: str = "moments",
        dataset: Optional[TrainingSet] = None,
        train_config: Optional[TrainConfig] = None,
        dynamic: bool = True,
        stability_rule: bool = False,
        state_dim: int = 1,
    ):
        if kind not in ("pen", "plugin"):
            raise ValueError("summary kind must be 'pen' or 'plugin'")
        if kind == "pen" and net is None:
            raise ValueError("a pen summary needs a network")
        self.kind = kind
        self.net = net
        self.plugin = plugin
        self.dataset = dataset if dataset is not None else TrainingSet()
        self.train_config = train_config or TrainConfig()
        self.dynamic = dynamic and kind == "pen"
        self.stability_rule = stability_rule
        self.state_dim = state_dim
        self.frozen = False
        self._pending_values: List[np.ndarray] = []
        self._pending_thetas: List[np.ndarray] = []

    def summarizer(self):
        if self.kind == "pen":
            return PenSummarizer(self.net)
        return PluginSummarizer(self.plugin, self.state_dim)

    def observed(self, obs: Trajectory) -> np.ndarray:
        return self.summarizer()(obs.values[None, :, :])[0]

    def record_pair(self, values: np.ndarray, theta: np.ndarray) -> None:
        """Bank a forward trajectory/parameter pair for the next retraining."""
        if not self.dynamic or self.frozen:
            return
        self._pending_values.append(np.asarray(values, dtype=float))
        self._pending_thetas.append(np.asarray(theta, dtype=float))

    def advance_round(self, rng: np.random.Generator) -> dict:
        """Commit the banked chunk and retrain (or freeze) the network."""
        info = {"retrained": False, "frozen": self.frozen, "train_seconds": 0.0}
        if not self.dynamic or self.frozen:
            self._pending_values.clear()
            self._pending_thetas.clear()
            return info
        if self._pending_values:
            self.dataset.append_chunk(
                np.stack(self._pending_values), np.stack(self._pending_thetas), "forward"
            )
            self._pending_values.clear()
            self._pending_thetas.clear()
        start = time.perf_counter()
        candidate, _ = train(self.net, self.dataset, self.train_config, rng)
        info["train_seconds"] = time.perf_counter() - start
        info["retrained"] = True
        if self.stability_rule:
            val_values, val_thetas = self.dataset.val_arrays()
            if stability_stopping(self.net, candidate, val_values, val_thetas) == "freeze":
                self.frozen = True
                info["frozen"] = True
                return info
        self.net = candidate
        return info


def simulate_prior_predictive(
    model: SdeModel,
    grid: TimeGrid,
    count: int,
    rng: np.random.Generator,
    x0: np.ndarray,
    scheme: str = "em",
    chunk: int = 256,
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw (theta, coarse path) pairs from the prior predictive.

    Paths are simulated in vectorized chunks; a chunk that explodes falls
    back to per-path simulation with fresh parameter draws, so the result
    always contains ``count`` valid pairs.
    """
    p = model.prior.dim
    thetas = np.empty((count, p))
    values = np.empty((count, grid.n_obs + 1, model.state_dim))
    filled = 0
    while filled < count:
        size = min(chunk, count - filled)
        batch_thetas = model.prior.sample(rng, size)
        noise = rng.standard_normal((size, grid.n_fine, model.noise_dim))
        x0_batch = np.tile(x0, (size, 1))
        try:
            states = _propagate_per_theta(model, batch_thetas, x0_batch, noise, grid, scheme)
        except SimulationError:
            states = np.empty((size, grid.n_fine + 1, model.state_dim))
            for i in range(size):
                while True:
                    try:
                        states[i] = _propagate(
                            model,
                            batch_thetas[i],
                            x0_batch[i : i + 1],
                            rng.standard_normal((1, grid.n_fine, model.noise_dim)),
                            grid.fine_steps,
                            scheme,
                        )[0]
                        break
                    except SimulationError:
                        batch_thetas[i] = model.prior.sample(rng)
        thetas[filled : filled + size] = batch_thetas
        values[filled : filled + size] = states[:, grid.obs_index, :]
        filled += size
    return thetas, values


def _propagate_per_theta(model, thetas, x0, noise, grid, scheme):
    """Propagate one path per parameter vector, vectorized over the batch."""
    from .models import _STEPPERS

    step = _STEPPERS[scheme]
    batch = thetas.shape[0]
    out = np.empty((batch, grid.n_fine + 1, model.state_dim))
    out[:, 0, :] = x0
    x = x0
    thetas_t = thetas.T
    for k in range(grid.n_fine):
        x = step(model, x, thetas_t, grid.fine_steps[k], noise[:, k, :])
        out[:, k + 1, :] = x
    return out


def pretrain_summary_network(
    model: SdeModel,
    grid: TimeGrid,
    pretrain_size: int,
    rng: np.random.Generator,
    x0: np.ndarray,
    train_config: Optional[TrainConfig] = None,
    scheme: str = "em",
    net: Optional[PenNetwork] = None,
) -> Tuple[PenNetwork, TrainingSet, TrainTrace]:
    """Prior-predictive pretraining of the summary network (round-1 state)."""
    thetas, values = simulate_prior_predictive(model, grid, pretrain_size, rng, x0, scheme)
    dataset = TrainingSet()
    dataset.append_chunk(values, thetas, "forward")
    if net is None:
        net = PenNetwork(model.prior.dim, rng=rng.spawn(1)[0])
    trained, trace = train(net, dataset, train_config, rng.spawn(1)[0])
    return trained, dataset, trace


# -- proposal evaluation -------------------------------------------------------


@dataclass
class _RoundContext:
    """Everything a worker needs to evaluate one proposal attempt."""

    model: SdeModel
    obs_values: np.ndarray
    obs_times: np.ndarray
    grid: TimeGrid
    config: SmcConfig
    weighting: WeightingSpec
    mode: str
    epsilon: float
    s_obs: np.ndarray
    summarize: Callable
    prior: PriorBox
    prev_particles: Optional[np.ndarray]
    prev_weights: Optional[np.ndarray]
    prev_cov: Optional[np.ndarray]

    def observation(self) -> Trajectory:
        return Trajectory(self.obs_times, self.obs_values, "coarse")


def _evaluate_attempt(ctx: _RoundContext, attempt_rng: np.random.Generator) -> dict:
    """Propose, simulate, summarize and (if accepted) weight one attempt."""
    if ctx.prev_particles is None:
        theta = ctx.prior.sample(attempt_rng)
    else:
        theta = propose(
            ctx.prev_particles,
            ctx.prev_weights,
            ctx.prev_cov,
            ctx.prior,
            attempt_rng,
            ctx.config.max_proposal_retries,
        )
        if theta is None:
            return {"status": "prop-fail"}
    obs = ctx.observation()
    try:
        if ctx.mode == "forward":
            traj = simulate_forward(
                ctx.model, theta, ctx.grid, obs.values[0], ctx.config.scheme, attempt_rng
            )
            coarse = traj.values[ctx.grid.obs_index]
            summary_input = coarse
            system = None
        else:
            system = run_lookahead_sis(
                ctx.model,
                theta,
                obs,
                ctx.grid,
                ctx.config.sim_particles,
                ctx.weighting,
                ctx.config.scheme,
                attempt_rng,
            )
            bwd_values, _ = backward_sample_batch(
                system,
                ctx.model,
                theta,
                BackwardConfig(ctx.config.backward_stride),
                attempt_rng,
                count=1,
            )
            summary_input = bwd_values[0]
    except (SimulationError, DegenerateSystemError, DegenerateBackwardError):
        return {"status": "sim-fail", "theta": theta}

    summary = ctx.summarize(summary_input[None, :, :])[0]
    distance = float(np.linalg.norm(summary - ctx.s_obs))
    if not np.isfinite(distance) or distance > ctx.epsilon:
        return {"status": "far", "theta": theta, "distance": distance}

    result = {"status": "accepted", "theta": theta, "distance": distance}
    if ctx.mode == "dc":
        sl = sl_log_ratio(
            system,
            ctx.model,
            theta,
            summary,
            ctx.summarize,
            guards=ctx.config.guards,
            backward_config=BackwardConfig(ctx.config.backward_stride),
            rng=attempt_rng,
        )
        if sl.rejected:
            return {"status": "sl-rejected", "theta": theta, "reason": sl.reason}
        result["sl_log_ratio"] = sl.log_ratio
        rep = select_representative_forward(system, obs)
        result["train_values"] = rep.values
    else:
        result["train_values"] = coarse
    return result


_POOL_CTX: Optional[_RoundContext] = None


def _pool_init(ctx: _RoundContext) -> None:
    global _POOL_CTX
    _POOL_CTX = ctx


def _pool_task(attempt_rng: np.random.Generator) -> dict:
    return _evaluate_attempt(_POOL_CTX, attempt_rng)


def _attempt_stream(ctx: _RoundContext, round_rng: np.random.Generator, workers: int):
    """Yield attempt results in attempt order.

    Attempt rngs are spawned from ``round_rng`` in attempt order, so the
    stream is identical for any worker count; extra workers only evaluate
    speculatively ahead.
    """
    if workers <= 1:
        while True:
            yield _evaluate_attempt(ctx, round_rng.spawn(1)[0])
    else:
        window = 4 * workers
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_pool_init, initargs=(ctx,)
        ) as pool:
            pending = [pool.submit(_pool_task, round_rng.spawn(1)[0]) for _ in range(window)]
            while True:
                result = pending.pop(0).result()
                pending.append(pool.submit(_pool_task, round_rng.spawn(1)[0]))
                yield result


# -- the driver ----------------------------------------------------------------


def run_abc_smc(
    model: SdeModel,
    obs: Trajectory,
    config: SmcConfig,
    summaries: SummaryManager,
    rng: np.random.Generator,
    workers: int = 1,
) -> RunResult:
    """Run the configured sampler and return one population per round.

    Round 1 draws from the prior with an infinite threshold; every later
    round perturbs the previous population, accepts on the summary
    distance, and (in data-conditional mode) weights accepted particles
    by the synthetic-likelihood ratio. Summaries are retrained at round
    boundaries while the manager allows it, and the observed summary is
    recomputed after every retraining. Stops on the round limit, on an
    acceptance rate below ``stop_acceptance`` once past round 2, or on
    budget exhaustion (partial results, status "budget").
    """
    if len(obs) != obs.values.shape[0] or obs.kind != "coarse":
        raise ValueError("run_abc_smc expects a coarse observation")
    grid = TimeGrid(obs.times, config.subintervals)
    weighting = config.weighting or default_weighting(model.name, grid)
    budget = int(config.budget_factor * config.n_particles)
    start = time.perf_counter()

    populations: List[Population] = []
    records: List[RoundRecord] = []
    prev: Optional[Population] = None
    status = "completed"
    s_obs = summaries.observed(obs)

    for round_index in range(1, config.max_rounds + 1):
        round_start = time.perf_counter()
        round_rng = rng.spawn(1)[0]

        train_info = {"retrained": False, "frozen": summaries.frozen, "train_seconds": 0.0}
        if round_index == 1:
            epsilon = np.inf
        else:
            train_info = summaries.advance_round(round_rng.spawn(1)[0])
            s_obs = summaries.observed(obs)
            epsilon = adaptive_threshold(prev.distances, config.alpha)

        ctx = _RoundContext(
            model=model,
            obs_values=obs.values,
            obs_times=obs.times,
            grid=grid,
            config=config,
            weighting=weighting,
            mode=config.mode,
            epsilon=epsilon,
            s_obs=s_obs,
            summarize=summaries.summarizer(),
            prior=model.prior,
            prev_particles=None if prev is None else prev.particles,
            prev_weights=None if prev is None else prev.weights,
            prev_cov=None if prev is None else prev.perturb_cov,
        )

        m = config.n_particles
        thetas = np.empty((m, model.prior.dim))
        log_weights = np.empty(m)
        distances = np.empty(m)
        filled = 0
        n_proposals = n_sims = n_sl_rejected = n_prop_failures = 0
        out_of_budget = False

        for result in _attempt_stream(ctx, round_rng, workers):
            n_proposals += 1
            status_code = result["status"]
            if status_code == "prop-fail":
                n_prop_failures += 1
            else:
                n_sims += 1
            if status_code == "accepted":
                theta = result["theta"]
                if config.mode == "dc":
                    sl_part = result["sl_log_ratio"]
                    log_w = smc_weight_forward(theta, prev, model.prior) + sl_part
                else:
                    log_w = smc_weight_forward(theta, prev, model.prior)
                thetas[filled] = theta
                log_weights[filled] = log_w
                distances[filled] = result["distance"]
                if "train_values" in result:
                    summaries.record_pair(result["train_values"], theta)
                filled += 1
                if filled == m:
                    break
            elif status_code == "sl-rejected":
                n_sl_rejected += 1
            if n_sims >= budget or n_proposals >= 10 * budget:
                out_of_budget = True
                break

        if out_of_budget and filled < 2:
            status = "budget"
            break
        thetas, log_weights, distances = thetas[:filled], log_weights[:filled], distances[:filled]

        norm = logsumexp(log_weights)
        if not np.isfinite(norm):
            status = "degenerate-weights"
            break
        log_weights = log_weights - norm
        weights = np.exp(log_weights)
        pop = Population(
            particles=thetas,
            log_weights=log_weights,
            distances=distances,
            threshold=float(epsilon),
            perturb_cov=perturb_cov(thetas, weights),
            round_index=round_index,
        )
        populations.append(pop)
        prev = pop

        acceptance_rate = filled / max(n_sims, 1)
        now = time.perf_counter()
        records.append(
            RoundRecord(
                round_index=round_index,
                epsilon=float(epsilon),
                accepted=filled,
                n_proposals=n_proposals,
                n_simulations=n_sims,
                n_sl_rejected=n_sl_rejected,
                n_proposal_failures=n_prop_failures,
                acceptance_rate=acceptance_rate,
                ess=float(1.0 / np.sum(weights**2)),
                retrained=train_info["retrained"],
                frozen=train_info["frozen"],
                train_seconds=train_info["train_seconds"],
                wall_seconds=now - round_start,
                cumulative_seconds=now - start,
            )
        )

        if out_of_budget:
            status = "budget"
            break
        if round_index > 2 and acceptance_rate < config.stop_acceptance:
            status = "stopped-acceptance"
            break

    return RunResult(populations, records, status)
