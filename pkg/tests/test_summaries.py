import numpy as np
import pytest

from sdeabc.models import Trajectory
from sdeabc.summaries import (
    PenNetwork,
    PenSummarizer,
    PluginSummarizer,
    TrainConfig,
    TrainingSet,
    pen_forward,
    plugin_summary,
    stability_stopping,
    train,
)


def _traj(values):
    values = np.asarray(values, dtype=float)
    return Trajectory(np.arange(len(values), dtype=float), values[:, None], "coarse")


def _pair_sum_dataset(n_pairs, length, rng, noise=0.05):
    """theta = a * sum of consecutive-pair products + b + noise."""
    values = rng.standard_normal((n_pairs, length))
    feature = (values[:, :-1] * values[:, 1:]).sum(axis=1)
    thetas = (0.35 * feature + 1.2 + noise * rng.standard_normal(n_pairs))[:, None]
    return values, thetas


class TestPenForward:
    def test_block_switch_invariance_example(self):
        rng = np.random.default_rng(0)
        net = PenNetwork(param_dim=2, rng=rng, dtype=np.float64)
        a, b, c = 0.3, -1.1, 2.4
        s1 = net.predict_paths(np.array([a, b, a, c, a]))
        s2 = net.predict_paths(np.array([a, c, a, b, a]))
        assert np.allclose(s1, s2, atol=1e-12)

    def test_block_switch_invariance_random_pairs(self):
        # any permutation of the interior pair multiset with the same first
        # symbol leaves the summary unchanged
        rng = np.random.default_rng(1)
        net = PenNetwork(param_dim=3, rng=rng, dtype=np.float64)
        a, b, c, d = rng.standard_normal(4)
        base = np.array([a, b, a, c, a, d, a])
        swapped = np.array([a, d, a, c, a, b, a])
        assert np.allclose(net.predict_paths(base), net.predict_paths(swapped), atol=1e-12)

    def test_zero_weight_network_outputs_bias(self):
        net = PenNetwork(param_dim=2, rng=np.random.default_rng(2), dtype=np.float64)
        net.params = [np.zeros_like(p) for p in net.params]
        net.params[-1] = np.array([0.7, -0.2])
        net.target_center = np.array([1.0, 2.0])
        net.target_scale = np.array([2.0, 3.0])
        out = net.predict_paths(np.array([0.5, 1.5, -0.5, 2.0]))
        assert out[0] == pytest.approx([0.7 * 2.0 + 1.0, -0.2 * 3.0 + 2.0])

    def test_length_validation(self):
        net = PenNetwork(param_dim=1, rng=np.random.default_rng(3))
        net.expected_length = 6
        with pytest.raises(ValueError, match="training grid"):
            net.predict_paths(np.zeros(5))
        net.expected_length = None
        with pytest.raises(ValueError, match="window"):
            net.predict_paths(np.zeros(1))

    def test_pen_forward_trajectory(self):
        net = PenNetwork(param_dim=2, rng=np.random.default_rng(4))
        traj = _traj([0.1, 0.4, -0.2, 0.9])
        out = pen_forward(net, traj)
        assert out.shape == (2,)


def test_gradients_match_central_differences():
    rng = np.random.default_rng(5)
    net = PenNetwork(param_dim=2, rng=rng, dtype=np.float64)
    values = rng.standard_normal((3, 5))
    targets = rng.standard_normal((3, 2))
    loss, grads = net.loss_and_grads(values, targets)
    eps = 1e-6
    for arr_idx, (param, grad) in enumerate(zip(net.params, grads)):
        flat_param = param.reshape(-1)
        flat_grad = grad.reshape(-1)
        picks = rng.choice(flat_param.size, size=min(40, flat_param.size), replace=False)
        for j in picks:
            orig = flat_param[j]
            flat_param[j] = orig + eps
            up, _ = net.loss_and_grads(values, targets)
            flat_param[j] = orig - eps
            down, _ = net.loss_and_grads(values, targets)
            flat_param[j] = orig
            fd = (up - down) / (2 * eps)
            rel = abs(flat_grad[j] - fd) / max(abs(fd), abs(flat_grad[j]), 1e-8)
            assert rel < 1e-4, f"array {arr_idx} element {j}: {flat_grad[j]} vs {fd}"


def test_standardization_roundtrip():
    net = PenNetwork(param_dim=3, rng=np.random.default_rng(6))
    net.target_center = np.array([1.0, -2.0, 0.5])
    net.target_scale = np.array([0.3, 4.0, 1.7])
    rng = np.random.default_rng(7)
    thetas = rng.standard_normal((50, 3)) * 5
    back = net.destandardize_outputs(net.standardize_targets(thetas))
    assert np.allclose(back, thetas, atol=1e-12)


class TestTrainingSet:
    def test_split_per_chunk(self):
        ts = TrainingSet()
        ts.append_chunk(np.zeros((10, 4)), np.zeros((10, 2)))
        ts.append_chunk(np.ones((5, 4)), np.ones((5, 2)))
        train_v, train_t = ts.train_arrays()
        val_v, val_t = ts.val_arrays()
        assert train_v.shape[0] == 8 + 4
        assert val_v.shape[0] == 2 + 1
        assert len(ts) == 15
        # chunk boundaries preserved: second chunk contributes ones
        assert np.all(train_v[8:] == 1.0)
        assert np.all(val_v[2:] == 1.0)

    def test_refuses_backward_provenance(self):
        ts = TrainingSet()
        with pytest.raises(ValueError, match="forward"):
            ts.append_chunk(np.zeros((4, 5)), np.zeros((4, 2)), provenance="backward")

    def test_rejects_mismatched_lengths(self):
        ts = TrainingSet()
        ts.append_chunk(np.zeros((4, 5)), np.zeros((4, 2)))
        with pytest.raises(ValueError, match="grid length"):
            ts.append_chunk(np.zeros((4, 6)), np.zeros((4, 2)))

    def test_prior_containment(self):
        from sdeabc.models import PriorBox

        ts = TrainingSet(prior=PriorBox([0.0], [1.0]))
        with pytest.raises(ValueError, match="prior box"):
            ts.append_chunk(np.zeros((2, 3)), np.array([[0.5], [1.5]]))

    def test_accepts_trajectory_lists(self):
        ts = TrainingSet()
        ts.append_chunk([_traj([0.0, 1.0, 2.0]), _traj([1.0, 1.0, 1.0])], np.zeros((2, 1)))
        assert ts.path_length == 3


class TestTraining:
    def test_pair_sum_regression_beats_constant_predictor(self):
        rng = np.random.default_rng(8)
        values, thetas = _pair_sum_dataset(1600, 12, rng)
        data = TrainingSet()
        data.append_chunk(values, thetas)
        net = PenNetwork(param_dim=1, rng=np.random.default_rng(9))
        config = TrainConfig(max_epochs=120, patience=30)
        trained, trace = train(net, data, config, rng=np.random.default_rng(10))

        val_v, val_t = data.val_arrays()
        mse = trained.mse_raw(val_v[:, :, 0], val_t)
        baseline = float(np.var(val_t))
        assert mse < 0.25 * baseline
        assert trace.best_epoch >= 0

    def test_training_is_deterministic(self):
        rng = np.random.default_rng(11)
        values, thetas = _pair_sum_dataset(400, 8, rng)
        data = TrainingSet()
        data.append_chunk(values, thetas)
        config = TrainConfig(max_epochs=5, patience=5)
        a, _ = train(PenNetwork(1, rng=np.random.default_rng(1)), data, config,
                     rng=np.random.default_rng(2))
        b, _ = train(PenNetwork(1, rng=np.random.default_rng(1)), data, config,
                     rng=np.random.default_rng(2))
        for pa, pb in zip(a.params, b.params):
            assert np.array_equal(pa, pb)

    def test_returned_weights_achieve_best_recorded_val_loss(self):
        rng = np.random.default_rng(12)
        values, thetas = _pair_sum_dataset(400, 8, rng)
        data = TrainingSet()
        data.append_chunk(values, thetas)
        config = TrainConfig(max_epochs=30, patience=30)
        trained, trace = train(PenNetwork(1, rng=np.random.default_rng(3)), data, config,
                               rng=np.random.default_rng(4))
        val_v, val_t = data.val_arrays()
        assert trained.mse_standardized(val_v[:, :, 0], val_t) == pytest.approx(
            trace.best_val_mse
        )
        assert trace.best_val_mse == pytest.approx(min(trace.val_mse))

    def test_retraining_on_grown_data_does_not_regress(self):
        rng = np.random.default_rng(13)
        values, thetas = _pair_sum_dataset(1200, 10, rng)
        data = TrainingSet()
        data.append_chunk(values[:800], thetas[:800])
        config = TrainConfig(max_epochs=60, patience=20)
        net1, _ = train(PenNetwork(1, rng=np.random.default_rng(5)), data, config,
                        rng=np.random.default_rng(6))
        old_val_v, old_val_t = data.val_arrays()
        before = net1.mse_raw(old_val_v[:, :, 0], old_val_t)

        data.append_chunk(values[800:], thetas[800:])
        net2, _ = train(net1, data, config, rng=np.random.default_rng(7))
        after = net2.mse_raw(old_val_v[:, :, 0], old_val_t)
        assert after <= before * 1.25

    def test_requires_batch_of_data(self):
        data = TrainingSet()
        data.append_chunk(np.zeros((10, 5)), np.zeros((10, 1)))
        with pytest.raises(ValueError, match="batch"):
            train(PenNetwork(1), data, TrainConfig(batch_size=256))

    def test_diverged_training_raises(self):
        from sdeabc.summaries import TrainingDivergedError

        rng = np.random.default_rng(14)
        values, thetas = _pair_sum_dataset(300, 6, rng)
        values[0, 0] = np.nan  # poisons the loss on the first epoch
        data = TrainingSet()
        data.append_chunk(values, thetas)
        config = TrainConfig(max_epochs=3, patience=3, batch_size=300)
        with pytest.raises(TrainingDivergedError):
            train(PenNetwork(1, dtype=np.float64), data, config, rng=rng)


class _StubNet:
    def __init__(self, mse):
        self._mse = mse

    def mse_raw(self, values, thetas):
        return self._mse


class TestStabilityRule:
    def test_identical_networks_freeze(self):
        net = PenNetwork(1, rng=np.random.default_rng(15), dtype=np.float64)
        values = np.random.default_rng(16).standard_normal((20, 6))
        thetas = np.random.default_rng(17).standard_normal((20, 1))
        assert stability_stopping(net, net.copy(), values, thetas) == "freeze"

    def test_halved_mse_continues(self):
        assert stability_stopping(_StubNet(1.0), _StubNet(0.5), None, None) == "continue"

    def test_marginal_improvement_freezes(self):
        assert stability_stopping(_StubNet(1.0), _StubNet(0.995), None, None) == "freeze"
        assert stability_stopping(_StubNet(1.0), _StubNet(0.98), None, None) == "continue"


class TestPluginSummaries:
    def test_constant_trajectory(self):
        out = plugin_summary("moments", _traj([2.5] * 8))
        assert out == pytest.approx([2.5, 0.0, 0.0, 0.0])

    def test_alternating_trajectory(self):
        out = plugin_summary("moments", _traj([0.0, 1.0] * 5))
        assert out[0] == pytest.approx(0.5)
        assert out[3] == pytest.approx(1.0)
        assert out[2] < 0  # alternation is anticorrelated at lag 1

    def test_linear_ramp_autocorrelation(self):
        out = plugin_summary("moments", _traj(np.arange(200.0)))
        assert 0.9 < out[2] < 1.0

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown plugin"):
            plugin_summary("quantiles", _traj([0.0, 1.0]))

    def test_multivariate_concatenation(self):
        values = np.stack([np.arange(6.0), np.ones(6)], axis=1)
        traj = Trajectory(np.arange(6.0), values, "coarse")
        out = plugin_summary("moments", traj)
        assert out.shape == (8,)
        assert out[4] == pytest.approx(1.0)  # second coordinate mean
        assert out[5] == pytest.approx(0.0)  # and zero spread

    def test_batch_adapters(self):
        values = np.random.default_rng(18).standard_normal((7, 10, 1))
        plug = PluginSummarizer("moments")
        assert plug(values).shape == (7, 4)
        net = PenNetwork(3, rng=np.random.default_rng(19))
        pen = PenSummarizer(net)
        assert pen(values).shape == (7, 3)
        assert pen.dim == 3


def test_serialization_roundtrip(tmp_path):
    rng = np.random.default_rng(20)
    net = PenNetwork(param_dim=2, rng=rng)
    net.expected_length = 9
    net.fit_standardization(rng.standard_normal((30, 9)), rng.standard_normal((30, 2)))
    path = tmp_path / "net.penw"
    net.save(path)
    loaded = PenNetwork.load(path)
    values = rng.standard_normal((4, 9))
    assert np.array_equal(net.predict_paths(values), loaded.predict_paths(values))
    assert loaded.expected_length == 9


def test_serialization_rejects_garbage(tmp_path):
    path = tmp_path / "bad.penw"
    path.write_bytes(b"not a network")
    with pytest.raises(ValueError, match="summary-network"):
        PenNetwork.load(path)
