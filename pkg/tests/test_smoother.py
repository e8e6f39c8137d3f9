import numpy as np
import pytest
from scipy.stats import chisquare

from sdeabc.lookahead import run_lookahead_sis
from sdeabc.models import TimeGrid, em_transition_logpdf, exact_observation, get_model
from sdeabc.smoother import (
    BackwardConfig,
    DegenerateBackwardError,
    backward_path_log_prob,
    backward_sample,
    backward_sample_batch,
    smoothing_probs,
)

OU_THETA = np.array([3.0, 1.0, 1.0])


def _small_system(n=3, n_particles=3, seed=17, delta=0.1, subintervals=4):
    ou = get_model("ou")
    rng = np.random.default_rng(seed)
    obs = exact_observation(ou, OU_THETA, delta, n, rng, x0=[3.0])
    grid = TimeGrid.regular(n, delta, subintervals)
    system = run_lookahead_sis(ou, OU_THETA, obs, grid, n_particles, rng=rng.spawn(1)[0])
    return ou, obs, grid, system


def test_smoothing_probs_uniform_for_identical_particles():
    ou = get_model("ou")
    states = np.full((4, 1), 2.0)
    probs = smoothing_probs(np.full(4, 0.25), states, np.array([2.1]), ou, OU_THETA, 0.1)
    assert probs == pytest.approx(np.full(4, 0.25))


def test_smoothing_probs_hand_normalization():
    # zero-drift unit-diffusion model; states chosen so the EM densities
    # toward target 0 have ratio 1:4, giving probabilities (0.2, 0.8)
    ou = get_model("ou")
    theta = np.array([0.0, 0.0, 1.0])
    elapsed = 0.5
    x1 = np.sqrt(2 * elapsed * np.log(4.0))
    states = np.array([[x1], [0.0]])
    probs = smoothing_probs(np.array([0.5, 0.5]), states, np.array([0.0]), ou, theta, elapsed)
    assert probs == pytest.approx([0.2, 0.8])


def test_smoothing_probs_zero_weight_excluded():
    ou = get_model("ou")
    states = np.array([[2.0], [2.5]])
    probs = smoothing_probs(np.array([1.0, 0.0]), states, np.array([2.2]), ou, OU_THETA, 0.1)
    assert probs == pytest.approx([1.0, 0.0])


def test_smoothing_probs_degenerate_raises():
    ou = get_model("ou")
    states = np.array([[2.0], [2.5]])
    with pytest.raises(DegenerateBackwardError):
        smoothing_probs(np.array([0.0, 0.0]), states, np.array([2.2]), ou, OU_THETA, 0.1)


def test_single_particle_backward_equals_forward_downsample():
    ou, obs, grid, system = _small_system(n_particles=1)
    traj = backward_sample(system, ou, OU_THETA, rng=np.random.default_rng(0))
    assert np.array_equal(traj.values, system.states[0, grid.obs_index, :])
    assert traj.kind == "coarse"


def test_backward_states_are_selected_from_forward_cloud():
    ou, obs, grid, system = _small_system(n=4, n_particles=6)
    values, indices = backward_sample_batch(
        system, ou, OU_THETA, rng=np.random.default_rng(1), count=20
    )
    assert values.shape == (20, 5, 1)
    assert indices.shape == (20, 4)
    for c in range(20):
        for i, k in enumerate(grid.obs_index[1:]):
            row = values[c, i + 1]
            assert any(np.array_equal(row, system.states[j, k]) for j in range(6))
        assert np.array_equal(values[c, 0], system.states[0, 0])


def test_backward_sample_reproducible():
    ou, obs, grid, system = _small_system()
    a = backward_sample(system, ou, OU_THETA, rng=np.random.default_rng(5))
    b = backward_sample(system, ou, OU_THETA, rng=np.random.default_rng(5))
    assert np.array_equal(a.values, b.values)


def test_degenerate_system_yields_identical_backward_draws():
    # one weight ~1 at every time makes the smoothing law a point mass
    ou, obs, grid, system = _small_system(n=4, n_particles=5, seed=47)
    rng = np.random.default_rng(0)
    winners = rng.integers(0, 5, size=grid.n_fine)
    log_w = np.full_like(system.log_weights, -200.0)
    log_w[winners, np.arange(grid.n_fine)] = 0.0
    norm = np.exp(log_w) / np.exp(log_w).sum(axis=0, keepdims=True)
    from sdeabc.lookahead import ParticleSystem

    degenerate = ParticleSystem(system.states, log_w, norm, OU_THETA, grid)
    values, _ = backward_sample_batch(
        degenerate, ou, OU_THETA, rng=np.random.default_rng(11), count=25
    )
    assert np.all(values == values[0][None])


def test_far_parameter_concentrates_backward_draws():
    # the weight-degeneracy scenario: proposal far outside the posterior
    # collapses the backward draws, while the true parameter keeps them varied
    ou = get_model("ou")
    rng = np.random.default_rng(3)
    obs = exact_observation(ou, OU_THETA, 0.5, 30, rng, x0=[0.01])
    grid = TimeGrid.regular(30, 0.5, 10)

    def per_column_variety(theta):
        system = run_lookahead_sis(
            ou, np.asarray(theta), obs, grid, 20, rng=np.random.default_rng(7)
        )
        _, idx = backward_sample_batch(
            system, ou, np.asarray(theta), rng=np.random.default_rng(11), count=40
        )
        return float(np.mean([len(np.unique(idx[:, i])) for i in range(idx.shape[1])]))

    far = per_column_variety([15.0, 5.0, 2.0])
    true = per_column_variety(OU_THETA)
    assert far < 1.5  # essentially a point mass at almost every time
    assert far < true / 2


def _oracle_path_probs_observation(system, model, theta, grid):
    """Direct enumeration of the joint smoothing approximation: pick one
    particle index per observation time and multiply the backward-kernel
    factors."""
    n = grid.n_obs
    n_part = system.n_particles
    delta = grid.delta
    omega = [system.weights_at(k) for k in grid.obs_index[1:]]
    paths = []
    probs = []
    for flat in range(n_part**n):
        path = [(flat // n_part**i) % n_part for i in range(n)]
        prob = omega[-1][path[-1]]
        for i in range(n - 1, 0, -1):
            dens = np.array(
                [
                    np.exp(
                        em_transition_logpdf(
                            model,
                            system.states[path[i], grid.obs_index[i + 1], :],
                            system.states[l, grid.obs_index[i], :],
                            theta,
                            delta,
                        )
                    )
                    for l in range(n_part)
                ]
            )
            terms = omega[i - 1] * dens
            prob *= terms[path[i - 1]] / terms.sum()
        paths.append(tuple(path))
        probs.append(prob)
    return paths, np.array(probs)


def _oracle_path_probs_fine(system, model, theta, grid):
    """Same enumeration over every fine time (the full recursion)."""
    n_fine = grid.n_fine
    n_part = system.n_particles
    omega = [system.weights_at(k) for k in range(1, n_fine + 1)]
    paths = []
    probs = []
    for flat in range(n_part**n_fine):
        path = [(flat // n_part**i) % n_part for i in range(n_fine)]
        prob = omega[-1][path[-1]]
        for k in range(n_fine - 1, 0, -1):
            dens = np.array(
                [
                    np.exp(
                        em_transition_logpdf(
                            model,
                            system.states[path[k], k + 1, :],
                            system.states[l, k, :],
                            theta,
                            float(grid.fine_steps[k]),
                        )
                    )
                    for l in range(n_part)
                ]
            )
            terms = omega[k - 1] * dens
            prob *= terms[path[k - 1]] / terms.sum()
        paths.append(tuple(path))
        probs.append(prob)
    return paths, np.array(probs)


def _chisquare_paths(indices, paths, probs, n_part):
    n_draws = indices.shape[0]
    radix = n_part ** np.arange(indices.shape[1])
    codes = indices @ radix
    counts = np.bincount(codes, minlength=n_part ** indices.shape[1]).astype(float)
    order = {sum(p[i] * n_part**i for i in range(len(p))): j for j, p in enumerate(paths)}
    observed = np.empty_like(probs)
    for code, j in order.items():
        observed[j] = counts[code]
    expected = probs * n_draws
    # fold rare cells together so the chi-square approximation is sound
    keep = expected >= 5
    observed = np.append(observed[keep], observed[~keep].sum())
    expected = np.append(expected[keep], expected[~keep].sum())
    if expected[-1] == 0:
        observed, expected = observed[:-1], expected[:-1]
    expected *= observed.sum() / expected.sum()
    return chisquare(observed, expected).pvalue


@pytest.mark.parametrize("n_particles,n", [(2, 2), (2, 3), (3, 2), (3, 3)])
def test_backward_draws_match_enumeration(n_particles, n):
    ou, obs, grid, system = _small_system(n=n, n_particles=n_particles, seed=23 + n_particles)
    paths, probs = _oracle_path_probs_observation(system, ou, OU_THETA, grid)
    assert probs.sum() == pytest.approx(1.0)
    _, indices = backward_sample_batch(
        system, ou, OU_THETA, rng=np.random.default_rng(101), count=100000
    )
    pvalue = _chisquare_paths(indices, paths, probs, n_particles)
    assert pvalue > 0.001


def test_backward_draws_match_enumeration_fine_stride():
    ou, obs, grid, system = _small_system(n=2, n_particles=2, seed=31, subintervals=2)
    paths, probs = _oracle_path_probs_fine(system, ou, OU_THETA, grid)
    assert probs.sum() == pytest.approx(1.0)
    _, indices = backward_sample_batch(
        system,
        ou,
        OU_THETA,
        config=BackwardConfig(stride="fine"),
        rng=np.random.default_rng(103),
        count=100000,
    )
    pvalue = _chisquare_paths(indices, paths, probs, 2)
    assert pvalue > 0.001


def test_backward_path_log_prob_agrees_with_oracle():
    ou, obs, grid, system = _small_system(n=3, n_particles=3, seed=41)
    paths, probs = _oracle_path_probs_observation(system, ou, OU_THETA, grid)
    for path, prob in zip(paths[:10], probs[:10]):
        lp = backward_path_log_prob(system, ou, OU_THETA, np.array(path))
        assert lp == pytest.approx(np.log(prob))


def test_backward_config_validation():
    with pytest.raises(ValueError):
        BackwardConfig(stride="weekly")
