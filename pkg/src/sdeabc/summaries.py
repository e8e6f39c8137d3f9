"""Learned and hand-crafted summary statistics.

The learned summary is a partially exchangeable network: an inner dense
network maps every window of ``markov_order + 1`` consecutive states to a
100-dimensional representation, the representations are summed, and an
outer dense network maps the first ``markov_order`` states plus that sum
to a point estimate of the parameter vector. By construction the output
is invariant under block-switch rearrangements of the path, which is the
right symmetry for Markov data. Everything is plain numpy with explicit
backpropagation and adaptive-moment updates.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .models import PriorBox, Trajectory

HIDDEN = 100

_MAGIC = b"PENW"
_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 1000
    patience: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 256

    def __post_init__(self):
        if min(self.max_epochs, self.patience, self.batch_size) < 1:
            raise ValueError("training hyperparameters must be positive")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("training hyperparameters must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment decays must lie in [0, 1)")


def _relu(a):
    return np.maximum(a, 0.0)


class PenNetwork:
    """Invariant summary network mapping a scalar path to dim(theta) values.

    Layer stack: inner (d+1)-100-100-100 with rectified-linear hidden
    units and a linear representation layer; outer (d+100)-100-p with one
    rectified-linear hidden layer and a linear output. Inputs and targets
    are standardized with constants frozen at training time.
    """

    def __init__(
        self,
        param_dim: int,
        markov_order: int = 1,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        if param_dim < 1 or markov_order < 1:
            raise ValueError("param_dim and markov_order must be >= 1")
        self.param_dim = param_dim
        self.markov_order = markov_order
        self.dtype = np.dtype(dtype)
        self.expected_length: Optional[int] = None
        self.input_center = 0.0
        self.input_scale = 1.0
        self.target_center = np.zeros(param_dim)
        self.target_scale = np.ones(param_dim)

        rng = rng or np.random.default_rng(0)
        d_in = markov_order + 1
        sizes = [
            (d_in, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, HIDDEN),
            (markov_order + HIDDEN, HIDDEN),
            (HIDDEN, param_dim),
        ]
        self.params: List[np.ndarray] = []
        for n_in, n_out in sizes:
            scale = np.sqrt(2.0 / n_in)
            self.params.append((rng.standard_normal((n_in, n_out)) * scale).astype(self.dtype))
            self.params.append(np.zeros(n_out, dtype=self.dtype))

    # -- plumbing ------------------------------------------------------------

    def copy(self) -> "PenNetwork":
        dup = PenNetwork.__new__(PenNetwork)
        dup.param_dim = self.param_dim
        dup.markov_order = self.markov_order
        dup.dtype = self.dtype
        dup.expected_length = self.expected_length
        dup.input_center = self.input_center
        dup.input_scale = self.input_scale
        dup.target_center = self.target_center.copy()
        dup.target_scale = self.target_scale.copy()
        dup.params = [p.copy() for p in self.params]
        return dup

    def fit_standardization(self, values: np.ndarray, targets: np.ndarray) -> None:
        """Freeze input/target centering constants from a training set."""
        self.input_center = float(np.mean(values))
        self.input_scale = float(max(np.std(values), 1e-12))
        self.target_center = np.mean(targets, axis=0)
        self.target_scale = np.maximum(np.std(targets, axis=0), 1e-12)

    def standardize_targets(self, targets: np.ndarray) -> np.ndarray:
        return (targets - self.target_center) / self.target_scale

    def destandardize_outputs(self, outputs: np.ndarray) -> np.ndarray:
        return outputs * self.target_scale + self.target_center

    # -- forward / backward ----------------------------------------------------

    def _windows(self, u: np.ndarray) -> np.ndarray:
        d = self.markov_order
        return np.lib.stride_tricks.sliding_window_view(u, d + 1, axis=1)

    def _forward(self, values: np.ndarray):
        """Standardized forward pass; returns the cache needed by backprop."""
        w1, b1, w2, b2, w3, b3, w4, b4, w5, b5 = self.params
        u = ((np.asarray(values, dtype=float) - self.input_center) / self.input_scale).astype(
            self.dtype
        )
        n_paths, length = u.shape
        d = self.markov_order
        if length < d + 1:
            raise ValueError("trajectory shorter than the network's window")
        windows = np.ascontiguousarray(self._windows(u)).reshape(-1, d + 1)
        a1 = windows @ w1 + b1
        h1 = _relu(a1)
        a2 = h1 @ w2 + b2
        h2 = _relu(a2)
        rep = h2 @ w3 + b3
        pooled = rep.reshape(n_paths, length - d, HIDDEN).sum(axis=1)
        outer_in = np.concatenate([u[:, :d], pooled], axis=1)
        a4 = outer_in @ w4 + b4
        h4 = _relu(a4)
        out = h4 @ w5 + b5
        return out, (u, windows, a1, h1, a2, h2, pooled, outer_in, a4, h4)

    def predict_paths(self, values: np.ndarray) -> np.ndarray:
        """Summaries for a batch of scalar paths, shape (B, L) -> (B, p)."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[None, :]
        if self.expected_length is not None and values.shape[1] != self.expected_length:
            raise ValueError(
                f"trajectory length {values.shape[1]} does not match the "
                f"training grid length {self.expected_length}"
            )
        out, _ = self._forward(values)
        return self.destandardize_outputs(out.astype(float))

    def loss_and_grads(
        self, values: np.ndarray, targets_std: np.ndarray
    ) -> Tuple[float, List[np.ndarray]]:
        """Mean-squared-error loss on standardized targets and its gradient
        with respect to every weight array."""
        w1, b1, w2, b2, w3, b3, w4, b4, w5, b5 = self.params
        out, cache = self._forward(values)
        u, windows, a1, h1, a2, h2, pooled, outer_in, a4, h4 = cache
        targets_std = np.asarray(targets_std, dtype=self.dtype)
        n_paths, length = u.shape
        d = self.markov_order

        diff = out - targets_std
        loss = float(np.mean(diff.astype(float) ** 2))

        dout = (2.0 / diff.size) * diff
        g_w5 = h4.T @ dout
        g_b5 = dout.sum(axis=0)
        dh4 = dout @ w5.T
        da4 = dh4 * (a4 > 0)
        g_w4 = outer_in.T @ da4
        g_b4 = da4.sum(axis=0)
        douter = da4 @ w4.T
        dpooled = douter[:, d:]
        drep = np.repeat(dpooled, length - d, axis=0)
        g_w3 = h2.T @ drep
        g_b3 = drep.sum(axis=0)
        dh2 = drep @ w3.T
        da2 = dh2 * (a2 > 0)
        g_w2 = h1.T @ da2
        g_b2 = da2.sum(axis=0)
        dh1 = da2 @ w2.T
        da1 = dh1 * (a1 > 0)
        g_w1 = windows.T @ da1
        g_b1 = da1.sum(axis=0)
        grads = [g_w1, g_b1, g_w2, g_b2, g_w3, g_b3, g_w4, g_b4, g_w5, g_b5]
        return loss, grads

    def mse_standardized(self, values: np.ndarray, targets: np.ndarray) -> float:
        out, _ = self._forward(values)
        diff = out.astype(float) - self.standardize_targets(targets)
        return float(np.mean(diff**2))

    def mse_raw(self, values: np.ndarray, targets: np.ndarray) -> float:
        """MSE in raw parameter space; comparable across networks with
        different standardization constants."""
        pred = self.predict_paths(values)
        return float(np.mean((pred - targets) ** 2))

    # -- persistence -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<B", _VERSION))
        buf.write(
            struct.pack(
                "<iii",
                self.markov_order,
                self.param_dim,
                -1 if self.expected_length is None else self.expected_length,
            )
        )
        arrays = self.params + [
            np.array([self.input_center, self.input_scale]),
            self.target_center,
            self.target_scale,
        ]
        buf.write(struct.pack("<i", len(arrays)))
        for arr in arrays:
            arr = np.asarray(arr, dtype="<f8")
            buf.write(struct.pack("<i", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}i", *arr.shape))
            buf.write(arr.tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, dtype=np.float32) -> "PenNetwork":
        buf = io.BytesIO(blob)
        if buf.read(4) != _MAGIC:
            raise ValueError("not a summary-network file")
        (version,) = struct.unpack("<B", buf.read(1))
        if version != _VERSION:
            raise ValueError(f"unsupported summary-network file version {version}")
        markov_order, param_dim, exp_len = struct.unpack("<iii", buf.read(12))
        (count,) = struct.unpack("<i", buf.read(4))
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack("<i", buf.read(4))
            shape = struct.unpack(f"<{ndim}i", buf.read(4 * ndim))
            n_items = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(buf.read(8 * n_items), dtype="<f8").reshape(shape)
            arrays.append(data)
        net = cls(param_dim, markov_order, rng=np.random.default_rng(0), dtype=dtype)
        net.expected_length = None if exp_len < 0 else exp_len
        net.params = [np.asarray(a, dtype=net.dtype) for a in arrays[:10]]
        net.input_center, net.input_scale = (float(v) for v in arrays[10])
        net.target_center = np.asarray(arrays[11], dtype=float)
        net.target_scale = np.asarray(arrays[12], dtype=float)
        return net

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "PenNetwork":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), dtype=dtype)


def pen_forward(net: PenNetwork, trajectory: Trajectory) -> np.ndarray:
    """Summary vector of a single coarse trajectory."""
    if trajectory.state_dim != 1:
        raise ValueError("the dense summary network handles scalar states only")
    return net.predict_paths(trajectory.values[:, 0])[0]


# -- training data -----------------------------------------------------------


class TrainingSet:
    """Growing dataset of (path, parameter) pairs with a fixed 80/20
    train/validation split applied to every appended chunk.

    Only forward-simulated paths may enter: pairs carry a provenance tag
    and anything but "forward" is refused, because data-conditional
    (backward) paths follow a different law than the one the regression
    is meant to learn.
    """

    TRAIN_FRACTION = 0.8

    def __init__(self, prior: Optional[PriorBox] = None):
        self.prior = prior
        self._chunks: List[Tuple[np.ndarray, np.ndarray, int]] = []
        self._length: Optional[int] = None
        self.provenances: List[str] = []

    def __len__(self) -> int:
        return sum(c[0].shape[0] for c in self._chunks)

    @property
    def path_length(self) -> Optional[int]:
        return self._length

    def append_chunk(self, values, thetas, provenance: str = "forward") -> None:
        if provenance != "forward":
            raise ValueError(
                f"refusing to store '{provenance}' trajectories: the summary "
                "network is trained on forward-simulated paths only"
            )
        if isinstance(values, (list, tuple)) and values and isinstance(values[0], Trajectory):
            values = np.stack([t.values for t in values])
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None]
        thetas = np.asarray(thetas, dtype=float)
        if values.shape[0] != thetas.shape[0]:
            raise ValueError("values and parameters have mismatched counts")
        if self._length is None:
            self._length = values.shape[1]
        elif values.shape[1] != self._length:
            raise ValueError("all stored trajectories must share the grid length")
        if self.prior is not None and not np.all(self.prior.contains(thetas)):
            raise ValueError("stored parameters must lie inside the prior box")
        n_train = int(values.shape[0] * self.TRAIN_FRACTION)
        self._chunks.append((values, thetas, n_train))
        self.provenances.extend([provenance] * values.shape[0])

    def _gather(self, train: bool) -> Tuple[np.ndarray, np.ndarray]:
        vs, ts = [], []
        for values, thetas, n_train in self._chunks:
            sl = slice(0, n_train) if train else slice(n_train, None)
            vs.append(values[sl])
            ts.append(thetas[sl])
        if not vs:
            raise ValueError("training set is empty")
        return np.concatenate(vs), np.concatenate(ts)

    def train_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._gather(train=True)

    def val_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._gather(train=False)


# -- training loop -----------------------------------------------------------


@dataclass
class TrainTrace:
    epochs: List[int] = field(default_factory=list)
    train_mse: List[float] = field(default_factory=list)
    val_mse: List[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = np.inf

    def rows(self):
        return list(zip(self.epochs, self.train_mse, self.val_mse))


def train(
    net: PenNetwork,
    data: TrainingSet,
    config: Optional[TrainConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[PenNetwork, TrainTrace]:
    """Adaptive-moment minibatch training with best-snapshot early stopping.

    Training starts from the weights of ``net`` (warm start across rounds)
    but returns a new network; the argument is left untouched. The
    returned weights are the snapshot with the lowest validation MSE.
    """
    config = config or TrainConfig()
    rng = rng or np.random.default_rng(0)
    if len(data) < config.batch_size:
        raise ValueError("training set smaller than one batch")

    train_vals, train_thetas = data.train_arrays()
    val_vals, val_thetas = data.val_arrays()
    if train_vals.shape[2] != 1:
        raise ValueError("the dense summary network handles scalar states only")
    train_vals = train_vals[:, :, 0]
    val_vals = val_vals[:, :, 0]

    out = net.copy()
    out.expected_length = train_vals.shape[1]
    out.fit_standardization(train_vals, train_thetas)
    targets_std = out.standardize_targets(train_thetas).astype(out.dtype)

    moments1 = [np.zeros_like(p) for p in out.params]
    moments2 = [np.zeros_like(p) for p in out.params]
    step = 0
    trace = TrainTrace()
    best_params = [p.copy() for p in out.params]
    stale = 0
    n_train = train_vals.shape[0]

    for epoch in range(config.max_epochs):
        order = rng.permutation(n_train)
        sq_sum = 0.0
        for start in range(0, n_train, config.batch_size):
            batch = order[start : start + config.batch_size]
            loss, grads = out.loss_and_grads(train_vals[batch], targets_std[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            sq_sum += loss * batch.size
            step += 1
            corr1 = 1.0 - config.beta1**step
            corr2 = 1.0 - config.beta2**step
            for p, g, m1, m2 in zip(out.params, grads, moments1, moments2):
                m1 *= config.beta1
                m1 += (1.0 - config.beta1) * g
                m2 *= config.beta2
                m2 += (1.0 - config.beta2) * g * g
                p -= (
                    config.learning_rate * (m1 / corr1) / (np.sqrt(m2 / corr2) + config.epsilon)
                ).astype(p.dtype)

        val_mse = out.mse_standardized(val_vals, val_thetas)
        trace.epochs.append(epoch)
        trace.train_mse.append(sq_sum / n_train)
        trace.val_mse.append(val_mse)
        if val_mse < trace.best_val_mse:
            trace.best_val_mse = val_mse
            trace.best_epoch = epoch
            best_params = [p.copy() for p in out.params]
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    out.params = best_params
    return out, trace


def stability_stopping(
    prev_net: PenNetwork,
    new_net: PenNetwork,
    val_values: np.ndarray,
    val_thetas: np.ndarray,
    margin: float = 0.01,
) -> str:
    """Freeze the summaries unless retraining beat the old network by more
    than ``margin`` (relative) on the expanded validation set."""
    values = np.asarray(val_values, dtype=float)
    if values.ndim == 3:
        values = values[:, :, 0]
    prev_mse = prev_net.mse_raw(values, val_thetas)
    new_mse = new_net.mse_raw(values, val_thetas)
    return "freeze" if new_mse > (1.0 - margin) * prev_mse else "continue"


# -- hand-crafted summaries ----------------------------------------------------


def _moment_summary_batch(values: np.ndarray) -> np.ndarray:
    """Per coordinate: mean, standard deviation, lag-1 autocorrelation and
    mean absolute increment, concatenated coordinate-major."""
    values = np.asarray(values, dtype=float)
    mean = values.mean(axis=1)
    centered = values - mean[:, None, :]
    var = (centered**2).mean(axis=1)
    sd = np.sqrt(var)
    cross = (centered[:, :-1, :] * centered[:, 1:, :]).sum(axis=1)
    denom = (centered**2).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        autocorr = np.where(denom > 0, cross / np.where(denom > 0, denom, 1.0), 0.0)
    mean_abs_inc = np.abs(np.diff(values, axis=1)).mean(axis=1)
    return np.stack([mean, sd, autocorr, mean_abs_inc], axis=-1).reshape(values.shape[0], -1)


PLUGIN_REGISTRY = {"moments": _moment_summary_batch}


def plugin_summary(name: str, trajectory: Trajectory) -> np.ndarray:
    """Deterministic hand-crafted summary of one coarse trajectory."""
    try:
        fn = PLUGIN_REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(PLUGIN_REGISTRY))
        raise ValueError(f"unknown plugin summary '{name}' (known: {known})") from None
    return fn(trajectory.values[None, :, :])[0]


@dataclass
class PenSummarizer:
    """Batch adapter: (B, L, 1) paths -> (B, p) learned summaries."""

    net: PenNetwork

    def __call__(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return self.net.predict_paths(values[:, :, 0])

    @property
    def dim(self) -> int:
        return self.net.param_dim


@dataclass
class PluginSummarizer:
    """Batch adapter for a registered hand-crafted summary."""

    name: str
    state_dim: int = 1

    def __post_init__(self):
        if self.name not in PLUGIN_REGISTRY:
            raise ValueError(f"unknown plugin summary '{self.name}'")

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return PLUGIN_REGISTRY[self.name](np.asarray(values, dtype=float))

    @property
    def dim(self) -> int:
        return 4 * self.state_dim
