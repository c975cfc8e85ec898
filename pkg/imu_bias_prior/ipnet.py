"""Bias-prior regression network and its training / inference loops.

The network reads a window of ``s`` IMU samples (accelerometer then gyroscope
columns) and produces ``n`` accelerometer and ``n`` gyroscope bias rows:

* encoder: four residual convolution blocks, each followed by max pooling
* sequence block: GRU, pre-norm multi-head self-attention with a residual
  connection, second GRU
* decoders: two per-timestep linear heads over the last ``n`` timesteps

Everything runs on :mod:`imu_bias_prior.autodiff`; parameters and buffers live
in :class:`ModelWeights`.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, ShapeError, Tape, Tensor
from .imu_model import BiasBounds, ImuBias, ImuModelError, ImuSample

logger = logging.getLogger(__name__)

INPUT_CHANNELS = 6
PRELU_INIT = 0.25
HEAD_INIT_SCALE = 0.1


class NetworkError(RuntimeError):
    """Raised for non-finite activations/losses and unusable training data."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(slots=True)
class IpnetConfig:
    s: int = 1000
    n: int = 50
    channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    kernels: List[int] = field(default_factory=lambda: [7, 3, 3, 3])
    pools: List[int] = field(default_factory=lambda: [2, 2, 2, 2])
    hidden: int = 64
    heads: int = 4
    stride: int = 200

    def __post_init__(self) -> None:
        self.channels = [int(c) for c in self.channels]
        self.kernels = [int(k) for k in self.kernels]
        self.pools = [int(p) for p in self.pools]
        if not len(self.channels) == len(self.kernels) == len(self.pools) == 4:
            raise ValueError("channels, kernels and pools must each list 4 encoder blocks")
        if any(k % 2 == 0 or k < 1 for k in self.kernels):
            raise ValueError(f"Kernel sizes must be odd and positive, got {self.kernels}")
        if any(p < 1 for p in self.pools) or any(c < 1 for c in self.channels):
            raise ValueError("Pool windows and channel widths must be positive")
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide hidden width ({self.hidden})")
        if self.n < 1 or self.stride < 1:
            raise ValueError("n and stride must be positive")
        if self.encoded_length < self.n:
            raise ValueError(
                f"Encoder output length {self.encoded_length} for s={self.s} is shorter than n={self.n}"
            )

    @property
    def encoder_lengths(self) -> List[int]:
        lengths = [self.s]
        for pool in self.pools:
            lengths.append(lengths[-1] // pool)
        return lengths

    @property
    def encoded_length(self) -> int:
        return self.encoder_lengths[-1]

    @classmethod
    def tiny(cls) -> "IpnetConfig":
        """Small configuration used for gradient checks and smoke runs."""

        return cls(s=64, n=8, channels=[4, 8, 8, 16], kernels=[3, 3, 3, 3], pools=[2, 2, 1, 1], hidden=8, heads=2, stride=16)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IpnetConfig":
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(slots=True)
class TrainingSchedule:
    optimizer: str = "rmsprop"
    lr: float = 1e-6
    decay_every: int = 10
    decay_factor: float = 0.1
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    train_ids: List[str] = field(default_factory=list)
    val_ids: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.optimizer not in ("rmsprop", "adam"):
            raise ValueError(f"Unsupported optimizer: {self.optimizer}")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ValueError("lr must be a non-negative finite number")
        if self.decay_every < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("decay_every and batch_size must be positive, epochs non-negative")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (1-based)."""

        return self.lr * self.decay_factor ** ((max(epoch, 1) - 1) // self.decay_every)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainingSchedule":
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(eq=False)
class ModelWeights:
    """Ordered parameters, non-trainable buffers and the owning config."""

    config: IpnetConfig
    params: Dict[str, Tensor]
    buffers: Dict[str, np.ndarray]

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            config=IpnetConfig.from_dict(self.config.to_dict()),
            params={k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        """Parameters then buffers, in their stored order."""

        return [(k, v.data) for k, v in self.params.items()] + list(self.buffers.items())

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


@dataclass(slots=True, eq=False)
class LabeledSequence:
    """IMU matrix (``N x 6``, accel then gyro) of one sequence with its label."""

    sequence_id: str
    imu: np.ndarray
    label: ImuBias
    timestamps: Optional[np.ndarray] = None


@dataclass(slots=True)
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(eq=False)
class TrainingResult:
    weights: ModelWeights
    log: List[EpochLog]
    best_epoch: int


@dataclass(slots=True, eq=False)
class PriorEstimate:
    """Time-stamped bias prior; ``warmup`` marks the configured initial prior."""

    timestamp: float
    bias: ImuBias
    warmup: bool = False


# ----------------------------------------------------------------------
# Parameters
# ----------------------------------------------------------------------
def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_weights(config: IpnetConfig, seed: Union[int, np.random.Generator] = 0) -> ModelWeights:
    """Randomly initialized weights (uniform +-1/sqrt(fan_in))."""

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {
        "input.mean": np.zeros(INPUT_CHANNELS),
        "input.std": np.ones(INPUT_CHANNELS),
    }
    c_in = INPUT_CHANNELS
    for i, (c_out, k) in enumerate(zip(config.channels, config.kernels)):
        name = f"encoder.{i}"
        arrays[f"{name}.conv1.weight"] = _uniform(rng, (c_out, c_in, k), c_in * k)
        arrays[f"{name}.conv1.bias"] = _uniform(rng, (c_out,), c_in * k)
        arrays[f"{name}.bn1.weight"] = np.ones(c_out)
        arrays[f"{name}.bn1.bias"] = np.zeros(c_out)
        arrays[f"{name}.prelu.weight"] = np.full(c_out, PRELU_INIT)
        arrays[f"{name}.conv2.weight"] = _uniform(rng, (c_out, c_out, k), c_out * k)
        arrays[f"{name}.conv2.bias"] = _uniform(rng, (c_out,), c_out * k)
        arrays[f"{name}.bn2.weight"] = np.ones(c_out)
        arrays[f"{name}.bn2.bias"] = np.zeros(c_out)
        arrays[f"{name}.skip.weight"] = _uniform(rng, (c_out, c_in, 1), c_in)
        arrays[f"{name}.skip.bias"] = _uniform(rng, (c_out,), c_in)
        for bn in ("bn1", "bn2"):
            buffers[f"{name}.{bn}.running_mean"] = np.zeros(c_out)
            buffers[f"{name}.{bn}.running_var"] = np.ones(c_out)
        c_in = c_out

    h = config.hidden
    for gru, width in (("gru1", c_in), ("gru2", h)):
        arrays[f"{gru}.weight_ih"] = _uniform(rng, (3 * h, width), h)
        arrays[f"{gru}.weight_hh"] = _uniform(rng, (3 * h, h), h)
        arrays[f"{gru}.bias_ih"] = _uniform(rng, (3 * h,), h)
        arrays[f"{gru}.bias_hh"] = _uniform(rng, (3 * h,), h)
        if gru == "gru1":
            arrays["attention.norm.weight"] = np.ones(h)
            arrays["attention.norm.bias"] = np.zeros(h)
            for proj in ("query", "key", "value", "out"):
                arrays[f"attention.{proj}.weight"] = _uniform(rng, (h, h), h)
                arrays[f"attention.{proj}.bias"] = _uniform(rng, (h,), h)
    for head in ("head_ba", "head_bw"):
        arrays[f"{head}.weight"] = HEAD_INIT_SCALE * _uniform(rng, (3, h), h)
        arrays[f"{head}.bias"] = np.zeros(3)

    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return ModelWeights(config=config, params=params, buffers=buffers)


# ----------------------------------------------------------------------
# Forward pass
# ----------------------------------------------------------------------
def _check_finite(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NetworkError(f"Non-finite activations in {layer}", {"layer": layer})
    return t


def _residual_block(x: Tensor, weights: ModelWeights, i: int, training: bool, update_stats: bool = True) -> Tensor:
    p, b = weights.params, weights.buffers
    name = f"encoder.{i}"

    def bn(t: Tensor, which: str) -> Tensor:
        return ad.batchnorm1d(
            t,
            p[f"{name}.{which}.weight"],
            p[f"{name}.{which}.bias"],
            b[f"{name}.{which}.running_mean"],
            b[f"{name}.{which}.running_var"],
            training,
            update_running=update_stats,
        )

    y = bn(ad.conv1d(x, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"]), "bn1")
    y = ad.prelu(y, p[f"{name}.prelu.weight"])
    y = bn(ad.conv1d(y, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"]), "bn2")
    skip = ad.conv1d(x, p[f"{name}.skip.weight"], p[f"{name}.skip.bias"])
    out = ad.maxpool1d(ad.add(y, skip), weights.config.pools[i])
    return _check_finite(out, name)


def _gru(seq: Tensor, weights: ModelWeights, prefix: str) -> Tensor:
    """Unrolled GRU over (B, L, C) returning every hidden state (B, L, H)."""

    p = weights.params
    h_dim = weights.config.hidden
    batch, length = seq.shape[0], seq.shape[1]
    gates_x = ad.linear(seq, p[f"{prefix}.weight_ih"], p[f"{prefix}.bias_ih"])
    h = Tensor(np.zeros((batch, h_dim)))
    states: List[Tensor] = []
    for t in range(length):
        gx = ad.select(gates_x, 1, t)
        gh = ad.linear(h, p[f"{prefix}.weight_hh"], p[f"{prefix}.bias_hh"])
        r = ad.sigmoid(ad.add(ad.narrow(gx, 1, 0, h_dim), ad.narrow(gh, 1, 0, h_dim)))
        z = ad.sigmoid(ad.add(ad.narrow(gx, 1, h_dim, h_dim), ad.narrow(gh, 1, h_dim, h_dim)))
        n = ad.tanh(ad.add(ad.narrow(gx, 1, 2 * h_dim, h_dim), ad.mul(r, ad.narrow(gh, 1, 2 * h_dim, h_dim))))
        h = ad.add(n, ad.mul(z, ad.sub(h, n)))
        states.append(h)
    return _check_finite(ad.stack(states, axis=1), prefix)


def _self_attention(x: Tensor, weights: ModelWeights, trace: Optional[Dict[str, Any]]) -> Tensor:
    p = weights.params
    batch, length, h_dim = x.shape
    heads = weights.config.heads
    d_head = h_dim // heads
    y = ad.layer_norm(x, p["attention.norm.weight"], p["attention.norm.bias"])

    def project(name: str) -> Tensor:
        t = ad.linear(y, p[f"attention.{name}.weight"], p[f"attention.{name}.bias"])
        return ad.transpose(ad.reshape(t, (batch, length, heads, d_head)), (0, 2, 1, 3))

    q, k, v = project("query"), project("key"), project("value")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
    attn = ad.softmax(scores)
    if trace is not None:
        trace["attention"] = attn.data.copy()
    context = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (batch, length, h_dim))
    out = ad.linear(context, p["attention.out.weight"], p["attention.out.bias"])
    return _check_finite(ad.add(x, out), "attention")


def standardize(windows: np.ndarray, weights: ModelWeights) -> np.ndarray:
    return (windows - weights.buffers["input.mean"]) / weights.buffers["input.std"]


def forward(
    window: np.ndarray,
    weights: ModelWeights,
    mode: str = "eval",
    trace: Optional[Dict[str, Any]] = None,
    update_stats: bool = True,
) -> Tuple[Tensor, Tensor]:
    """Run the network on one ``(s, 6)`` window or a ``(B, s, 6)`` batch.

    Returns ``(ba_seq, bw_seq)`` shaped ``(n, 3)`` (or ``(B, n, 3)``). When a
    ``trace`` dict is given it receives the encoder lengths and the attention
    matrix. ``update_stats=False`` leaves the batchnorm running buffers
    untouched in train mode.
    """

    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode}")
    config = weights.config
    data = np.asarray(window, dtype=np.float64)
    single = data.ndim == 2
    batch = data[None] if single else data
    if batch.ndim != 3 or batch.shape[1:] != (config.s, INPUT_CHANNELS):
        raise ShapeError(f"forward: window shape {data.shape} does not match ({config.s}, {INPUT_CHANNELS})")
    if not np.all(np.isfinite(batch)):
        raise NetworkError("Input window contains non-finite values", {"layer": "input"})

    training = mode == "train"
    x = Tensor(np.ascontiguousarray(standardize(batch, weights).transpose(0, 2, 1)))
    lengths = [x.shape[2]]
    for i in range(len(config.channels)):
        x = _residual_block(x, weights, i, training, update_stats)
        lengths.append(x.shape[2])
    if trace is not None:
        trace["encoder_lengths"] = lengths

    seq = _gru(ad.transpose(x, (0, 2, 1)), weights, "gru1")
    seq = _self_attention(seq, weights, trace)
    seq = _gru(seq, weights, "gru2")
    tail = ad.narrow(seq, 1, seq.shape[1] - config.n, config.n)
    p = weights.params
    ba_seq = _check_finite(ad.linear(tail, p["head_ba.weight"], p["head_ba.bias"]), "head_ba")
    bw_seq = _check_finite(ad.linear(tail, p["head_bw.weight"], p["head_bw.bias"]), "head_bw")
    if single:
        return ad.select(ba_seq, 0, 0), ad.select(bw_seq, 0, 0)
    return ba_seq, bw_seq


def predict(window: np.ndarray, weights: ModelWeights) -> ImuBias:
    """Mean of the decoder rows for one window (eval mode)."""

    ba_seq, bw_seq = forward(window, weights, "eval")
    return ImuBias(ba_seq.data.mean(axis=0), bw_seq.data.mean(axis=0))


def predict_windows(windows: np.ndarray, weights: ModelWeights, batch_size: int = 32) -> np.ndarray:
    """``(W, 6)`` predictions ``[ba | bw]`` for a stack of windows."""

    out = np.empty((len(windows), 6))
    for start in range(0, len(windows), batch_size):
        ba_seq, bw_seq = forward(windows[start : start + batch_size], weights, "eval")
        out[start : start + batch_size, :3] = ba_seq.data.mean(axis=1)
        out[start : start + batch_size, 3:] = bw_seq.data.mean(axis=1)
    return out


def loss(ba_seq: Tensor, bw_seq: Tensor, label: Union[ImuBias, np.ndarray]) -> Tensor:
    """``mean|ba_seq - ba| + mean|bw_seq - bw|`` with the label broadcast over rows.

    ``label`` is one :class:`ImuBias` or a ``(B, 6)`` array for batched output.
    """

    if isinstance(label, ImuBias):
        target_ba = np.broadcast_to(label.ba, ba_seq.shape)
        target_bw = np.broadcast_to(label.bw, bw_seq.shape)
    else:
        labels = np.asarray(label, dtype=np.float64).reshape(-1, 6)
        target_ba = np.broadcast_to(labels[:, None, :3], ba_seq.shape)
        target_bw = np.broadcast_to(labels[:, None, 3:], bw_seq.shape)
    return ad.add(ad.l1_loss(ba_seq, target_ba), ad.l1_loss(bw_seq, target_bw))


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------
def imu_matrix(samples: Sequence[ImuSample]) -> np.ndarray:
    """Stack samples into ``(N, 6)`` rows ``[accel | gyro]``."""

    return np.array([np.concatenate([s.accel, s.gyro]) for s in samples], dtype=np.float64).reshape(-1, 6)


def cut_windows(sequence: LabeledSequence, config: IpnetConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Windows of ``s`` samples every ``stride`` samples, each carrying the sequence label."""

    data = np.asarray(sequence.imu, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != INPUT_CHANNELS:
        raise ShapeError(f"cut_windows: IMU matrix shape {data.shape} is not (N, 6)")
    starts = range(0, data.shape[0] - config.s + 1, config.stride)
    windows = np.stack([data[i : i + config.s] for i in starts]) if len(starts) else np.empty((0, config.s, 6))
    labels = np.tile(sequence.label.as_vector(), (len(windows), 1))
    return windows, labels


def _collect(sequences: Sequence[LabeledSequence], config: IpnetConfig) -> Tuple[np.ndarray, np.ndarray]:
    parts = [cut_windows(seq, config) for seq in sequences]
    windows = [w for w, _ in parts if len(w)]
    labels = [y for w, y in parts if len(w)]
    if not windows:
        return np.empty((0, config.s, 6)), np.empty((0, 6))
    return np.concatenate(windows), np.concatenate(labels)


def split_sequences(
    sequences: Sequence[LabeledSequence], schedule: TrainingSchedule
) -> Tuple[List[LabeledSequence], List[LabeledSequence]]:
    """Training / validation split by sequence id.

    Without explicit ``train_ids`` every sequence not listed in ``val_ids`` trains.
    """

    val_ids = set(schedule.val_ids)
    train_ids = set(schedule.train_ids)
    val = [s for s in sequences if s.sequence_id in val_ids]
    if train_ids:
        train_set = [s for s in sequences if s.sequence_id in train_ids]
    else:
        train_set = [s for s in sequences if s.sequence_id not in val_ids]
    return train_set, val


def evaluate_loss(windows: np.ndarray, labels: np.ndarray, weights: ModelWeights, batch_size: int = 32) -> float:
    """Window-weighted mean loss in eval mode."""

    total = 0.0
    for start in range(0, len(windows), batch_size):
        batch = windows[start : start + batch_size]
        ba_seq, bw_seq = forward(batch, weights, "eval")
        total += loss(ba_seq, bw_seq, labels[start : start + batch_size]).item() * len(batch)
    return total / len(windows)


def _fit_normalization(windows: np.ndarray, weights: ModelWeights) -> None:
    flat = windows.reshape(-1, INPUT_CHANNELS)
    std = flat.std(axis=0)
    weights.buffers["input.mean"] = flat.mean(axis=0)
    weights.buffers["input.std"] = np.where(std > 1e-12, std, 1.0)


def train(
    sequences: Sequence[LabeledSequence],
    config: IpnetConfig,
    schedule: TrainingSchedule,
    initial: Optional[ModelWeights] = None,
) -> TrainingResult:
    """Train with the L1 loss and return the best-validation weights.

    Epoch 0 of the log is the evaluation of the initial weights; the learning
    rate decays by ``decay_factor`` every ``decay_every`` epochs. An epoch whose
    rate is 0 changes neither parameters nor batchnorm buffers.
    """

    train_set, val_set = split_sequences(sequences, schedule)
    train_x, train_y = _collect(train_set, config)
    val_x, val_y = _collect(val_set, config)
    if len(train_x) == 0 or len(val_x) == 0:
        raise NetworkError(
            "Training needs at least one training and one validation window",
            {"train_windows": len(train_x), "val_windows": len(val_x), "s": config.s},
        )

    rng = np.random.default_rng(schedule.seed)
    weights = initial.copy() if initial is not None else init_weights(config, rng)
    if initial is None:
        _fit_normalization(train_x, weights)
    params = weights.parameters()

    log = [EpochLog(0, schedule.lr_at(1), evaluate_loss(train_x, train_y, weights), evaluate_loss(val_x, val_y, weights))]
    best, best_epoch = weights.copy(), 0
    logger.info("Training on %d windows, validating on %d", len(train_x), len(val_x))
    state: Optional[OptimizerState] = None
    for epoch in range(1, schedule.epochs + 1):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(len(train_x))
        batch_losses: List[float] = []
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            with Tape() as tape:
                ba_seq, bw_seq = forward(train_x[idx], weights, "train", update_stats=lr > 0)
                value = loss(ba_seq, bw_seq, train_y[idx])
            if not math.isfinite(value.item()):
                raise NetworkError(
                    "Training loss became non-finite",
                    {"epoch": epoch, "batch_start": start, "lr": lr},
                )
            grads = tape.backward(value, wrt=params)
            state = ad.optimizer_step(schedule.optimizer, params, [grads[t] for t in params], state, lr)
            batch_losses.append(value.item())
        val_loss = evaluate_loss(val_x, val_y, weights)
        log.append(EpochLog(epoch, lr, float(np.mean(batch_losses)), val_loss))
        logger.info("epoch %d lr=%.3g train=%.6f val=%.6f", epoch, lr, log[-1].train_loss, val_loss)
        if val_loss < log[best_epoch].val_loss:
            best, best_epoch = weights.copy(), epoch
    return TrainingResult(weights=best, log=log, best_epoch=best_epoch)


# ----------------------------------------------------------------------
# Inference
# ----------------------------------------------------------------------
def sliding_inference(
    stream: Union[Sequence[ImuSample], Tuple[np.ndarray, np.ndarray]],
    weights: ModelWeights,
    initial_prior: Optional[ImuBias] = None,
    on_window: Optional[Callable[[int, float], None]] = None,
    bounds: Optional[BiasBounds] = None,
) -> List[PriorEstimate]:
    """Bias prior stream: a warm-up entry, then one prediction per stride.

    ``stream`` is a sample list or ``(timestamps, imu_matrix)``. Each prediction
    is stamped with the final sample of its window; ``on_window(index, seconds)``
    receives the wall time of every window. A prediction outside ``bounds``
    raises :class:`NetworkError`.
    """

    if isinstance(stream, tuple):
        stamps, data = (np.asarray(a, dtype=np.float64) for a in stream)
    else:
        stamps = np.array([s.timestamp for s in stream], dtype=np.float64)
        data = imu_matrix(stream)
    if len(stamps) == 0:
        return []
    config = weights.config
    bounds = bounds or BiasBounds()
    initial_prior = initial_prior or ImuBias.zero()
    out = [PriorEstimate(float(stamps[0]), initial_prior, warmup=True)]
    if len(stamps) < config.s:
        logger.warning("Stream of %d samples is shorter than one window (%d)", len(stamps), config.s)
        return out
    for index, start in enumerate(range(0, len(stamps) - config.s + 1, config.stride)):
        began = time.perf_counter()
        bias = predict(data[start : start + config.s], weights)
        if on_window is not None:
            on_window(index, time.perf_counter() - began)
        stamp = float(stamps[start + config.s - 1])
        try:
            bounds.check(bias)
        except ImuModelError as exc:
            raise NetworkError(
                f"Network prediction at t={stamp:.3f} is implausible: {exc}",
                {"window": index, "timestamp": stamp, "ba": bias.ba.tolist(), "bw": bias.bw.tolist()},
            ) from exc
        out.append(PriorEstimate(stamp, bias))
    return out


__all__ = [
    "EpochLog",
    "IpnetConfig",
    "LabeledSequence",
    "ModelWeights",
    "NetworkError",
    "PriorEstimate",
    "TrainingResult",
    "TrainingSchedule",
    "cut_windows",
    "evaluate_loss",
    "forward",
    "imu_matrix",
    "init_weights",
    "loss",
    "predict",
    "predict_windows",
    "sliding_inference",
    "split_sequences",
    "standardize",
    "train",
]
