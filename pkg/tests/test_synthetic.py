import numpy as np
import pytest

from sdeabc.lookahead import WeightingSpec, run_lookahead_sis
from sdeabc.models import (
    DegenerateCovarianceError,
    TimeGrid,
    exact_observation,
    get_model,
)
from sdeabc.synthetic import (
    GuardConfig,
    condition_number,
    empirical_gaussian_logpdf,
    ratio_from_summary_sets,
    sl_log_ratio,
)

OU_THETA = np.array([3.0, 1.0, 1.0])


class TestEmpiricalGaussian:
    def test_hand_value_1d(self):
        val = empirical_gaussian_logpdf(2.0, np.array([1.0, 2.0, 3.0]))
        assert val == pytest.approx(-0.5 * np.log(2 * np.pi))
        assert val == pytest.approx(-0.9189, abs=1e-4)

    def test_one_sd_drop(self):
        samples = np.array([1.0, 2.0, 3.0])
        peak = empirical_gaussian_logpdf(2.0, samples)
        off = empirical_gaussian_logpdf(3.0, samples)  # sd is exactly 1
        assert peak - off == pytest.approx(0.5)

    def test_duplicated_samples_raise(self):
        with pytest.raises(DegenerateCovarianceError):
            empirical_gaussian_logpdf(1.0, np.full(5, 1.0))

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="dim"):
            empirical_gaussian_logpdf(np.zeros(3), np.zeros((3, 3)))


class TestConditionNumber:
    def test_identity(self):
        assert condition_number(np.eye(3)) == pytest.approx(1.0)

    def test_diagonal_ratio(self):
        assert condition_number(np.diag([1.0, 1e-4])) == pytest.approx(1e4)

    def test_rank_deficient_is_infinite(self):
        cov = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert condition_number(cov) == np.inf

    def test_scalar_variance(self):
        assert condition_number(np.array([[2.5]])) == pytest.approx(1.0)
        assert condition_number(np.array([[0.0]])) == np.inf


class TestRatioFromSets:
    def test_identical_sets_give_zero_and_survive_clip(self):
        sets = np.array([[0.0], [1.0], [2.0]])
        est = ratio_from_summary_sets(np.array([1.0]), sets, sets.copy())
        assert not est.rejected
        # exactly zero sits on the clip boundary and is kept (clip is strict)
        assert est.log_ratio == 0.0

    def test_hand_value(self):
        fwd = np.array([0.0, 2.0])
        bwd = np.array([1.0, 3.0])
        est = ratio_from_summary_sets(
            np.array([1.0]), fwd, bwd, GuardConfig(clip_positive_log_ratio=False)
        )
        assert est.log_ratio == pytest.approx(0.25)
        # with the clip enabled the positive ratio collapses to zero weight
        clipped = ratio_from_summary_sets(np.array([1.0]), fwd, bwd, GuardConfig())
        assert clipped.log_ratio == -np.inf
        assert not clipped.rejected

    def test_negative_ratio_untouched_by_clip(self):
        fwd = np.array([0.0, 2.0])
        bwd = np.array([1.0, 3.0])
        est = ratio_from_summary_sets(np.array([2.5]), fwd, bwd, GuardConfig())
        assert est.log_ratio is not None and est.log_ratio < 0

    def test_constant_backward_set_rejected_via_condition_number(self):
        fwd = np.array([[0.0, 1.0], [2.0, -1.0], [1.0, 0.5]])
        bwd = np.array([[1.0, 1.0]] * 3)
        est = ratio_from_summary_sets(np.array([1.0, 0.0]), fwd, bwd)
        assert est.rejected
        assert est.reason == "condition-number"
        assert est.bwd_condition == np.inf

    def test_moderately_conditioned_backward_passes_guard(self):
        rng = np.random.default_rng(0)
        fwd = rng.standard_normal((30, 2))
        bwd = rng.standard_normal((30, 2)) * np.array([1.0, 0.5])
        est = ratio_from_summary_sets(np.zeros(2), fwd, bwd)
        assert not est.rejected
        assert est.bwd_condition < 1e3

    def test_guard_threshold_validation(self):
        with pytest.raises(ValueError):
            GuardConfig(max_condition_number=1.0)


def _system(theta, seed, n=20, n_particles=20, delta=0.1, subintervals=5):
    ou = get_model("ou")
    rng = np.random.default_rng(seed)
    obs = exact_observation(ou, OU_THETA, delta, n, rng, x0=[0.01])
    grid = TimeGrid.regular(n, delta, subintervals)
    system = run_lookahead_sis(
        ou, np.asarray(theta), obs, grid, n_particles, rng=rng.spawn(1)[0]
    )
    return ou, system


class _LastAndMean:
    def __call__(self, values):
        return np.stack([values[:, -1, 0], values[:, :, 0].mean(axis=1)], axis=1)


class TestSlLogRatio:
    def test_healthy_system_gives_finite_nonpositive_ratio(self):
        ou, system = _system(OU_THETA, seed=1)
        summarize = _LastAndMean()
        s_eval = summarize(system.coarse_states()[:1])[0]
        est = sl_log_ratio(
            system, ou, OU_THETA, s_eval, summarize, rng=np.random.default_rng(2)
        )
        assert not est.rejected
        assert est.log_ratio <= 0.0
        assert not np.isnan(est.log_ratio)

    def test_clipped_never_positive_never_nan(self):
        summarize = _LastAndMean()
        for seed in range(6):
            ou, system = _system(OU_THETA, seed=10 + seed, n=6, n_particles=8)
            s_eval = summarize(system.coarse_states()[:1])[0]
            est = sl_log_ratio(
                system, ou, OU_THETA, s_eval, summarize, rng=np.random.default_rng(seed)
            )
            if not est.rejected:
                assert est.log_ratio <= 0.0
                assert not np.isnan(est.log_ratio)

    def test_degenerate_far_parameter_rejected(self):
        # Supplement scenario: proposal far outside the posterior collapses
        # the backward draws, making their summary covariance singular
        ou = get_model("ou")
        rng = np.random.default_rng(3)
        obs = exact_observation(ou, OU_THETA, 0.5, 40, rng, x0=[0.01])
        grid = TimeGrid.regular(40, 0.5, 10)
        theta_far = np.array([15.0, 5.0, 2.0])
        system = run_lookahead_sis(ou, theta_far, obs, grid, 20, rng=np.random.default_rng(4))
        summarize = _LastAndMean()
        s_eval = np.array([3.0, 3.0])
        est = sl_log_ratio(
            system, ou, theta_far, s_eval, summarize, rng=np.random.default_rng(5)
        )
        assert est.rejected
        assert est.bwd_condition > 1e3 or est.reason == "degenerate-backward"

    def test_deterministic_given_rng(self):
        ou, system = _system(OU_THETA, seed=6)
        summarize = _LastAndMean()
        s_eval = np.array([3.0, 2.5])
        a = sl_log_ratio(system, ou, OU_THETA, s_eval, summarize, rng=np.random.default_rng(9))
        b = sl_log_ratio(system, ou, OU_THETA, s_eval, summarize, rng=np.random.default_rng(9))
        assert a.log_ratio == b.log_ratio

    def test_draw_count_override(self):
        ou, system = _system(OU_THETA, seed=7, n_particles=10)
        calls = []

        def summarize(values):
            calls.append(values.shape[0])
            return _LastAndMean()(values)

        sl_log_ratio(
            system, ou, OU_THETA, np.zeros(2), summarize, n_draws=25,
            rng=np.random.default_rng(1),
        )
        assert calls == [10, 25]


def test_forward_and_conditional_laws_agree_on_flat_weighting():
    # with an enormously inflated weighting bandwidth the lookahead weights
    # are flat, so backward trajectories follow the forward law and the
    # log-ratio concentrates near zero as P grows
    ou = get_model("ou")
    theta = np.array([0.0, 0.0, 1.0])  # driftless unit-noise diffusion
    grid = TimeGrid.regular(3, 0.25, 4)
    rng = np.random.default_rng(42)
    spec = WeightingSpec("em-gaussian-scaled", cov_scale=1e8)
    guards = GuardConfig(max_condition_number=np.inf, clip_positive_log_ratio=False)
    summarize = _LastAndMean()

    from sdeabc.models import Trajectory

    ratios = []
    for rep in range(60):
        obs_traj = Trajectory.coarse(
            grid, np.zeros((4, 1))
        )  # flat weights ignore the observation anyway
        system = run_lookahead_sis(
            ou, theta, obs_traj, grid, 150, spec=spec, rng=rng.spawn(1)[0]
        )
        s_eval = summarize(system.coarse_states()[:1])[0]
        est = sl_log_ratio(
            system, ou, theta, s_eval, summarize, guards=guards, rng=rng.spawn(1)[0]
        )
        assert not est.rejected
        ratios.append(est.log_ratio)
    ratios = np.asarray(ratios)
    se = ratios.std(ddof=1) / np.sqrt(len(ratios))
    assert abs(ratios.mean()) < 3 * se
