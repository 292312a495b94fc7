"""Parallel-branch dilated-convolution classifier over 2-step sensor windows.

The forward pipeline is: input, elementwise product with a per-sensor weight
vector (broadcast over batch and time), three parallel branches of
convolution + batch norm + ReLU + average pooling (one branch dilated along
the feature axis), flatten and concatenate, dropout, a hidden dense layer
with ReLU, and a sigmoid multi-task head. Stage-one training runs minibatch
SGD on a weighted binary cross-entropy over every parameter except the
sensor weights, which stay at their all-ones identity until fine-tuning.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GeometryError, NumericError, RunningStats, ShapeError, Tensor
from .ioutil import atomic_write_bytes

PROB_EPS = 1e-7
CHECKPOINT_VERSION = 1


class TrainingDivergenceError(NumericError):
    """Training produced a non-finite loss or parameter."""


class CorruptCheckpointError(Exception):
    """Checkpoint file is truncated, inconsistent, or fails its CRC."""


@dataclass(frozen=True)
class ArchitectureConfig:
    """Shape of the classifier; the defaults give the full-size network."""

    num_features: int
    num_tasks: int = 1
    time_steps: int = 2
    branch_widths: tuple = (1, 3, 5)
    kernels_per_branch: int = 32
    dilated_branch: int = 2
    dilation: int = 2
    pool_window: tuple = (1, 2)
    dropout_rate: float = 0.5
    hidden_width: int = 64

    def __post_init__(self):
        object.__setattr__(self, "branch_widths", tuple(self.branch_widths))
        object.__setattr__(self, "pool_window", tuple(self.pool_window))
        if self.time_steps != 2:
            raise ValueError("time_steps is fixed at 2")
        if self.num_features < 1 or self.num_tasks < 1:
            raise ValueError("num_features and num_tasks must be positive")
        if len(self.branch_widths) != 3 or any(w < 1 for w in self.branch_widths):
            raise ValueError("exactly three branches with positive kernel widths are required")
        if self.kernels_per_branch < 1 or self.hidden_width < 1:
            raise ValueError("kernels_per_branch and hidden_width must be positive")
        if not 0 <= self.dilated_branch < 3:
            raise ValueError("dilated_branch must index one of the three branches")
        if self.dilation < 2:
            raise ValueError("the dilated branch needs a dilation rate of at least 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        ph, pw = self.pool_window
        if ph != 1 or pw < 1:
            raise ValueError("pool_window must be (1, w): branch feature maps are one row tall")
        for i in range(3):
            kw = self.branch_widths[i]
            dw = self.branch_dilation(i)[1]
            reach = (kw - 1) * dw + 1
            if reach > self.num_features:
                raise GeometryError(
                    f"branch {i}: receptive field {reach} exceeds {self.num_features} features"
                )
            if self.branch_output_width(i) < 1:
                raise GeometryError(f"branch {i}: pooling window empties the feature map")

    def branch_dilation(self, i):
        return (1, self.dilation) if i == self.dilated_branch else (1, 1)

    def branch_output_width(self, i):
        kw = self.branch_widths[i]
        dw = self.branch_dilation(i)[1]
        conv_w = self.num_features - (kw - 1) * dw
        return conv_w // self.pool_window[1]

    @property
    def concat_width(self):
        return self.kernels_per_branch * sum(self.branch_output_width(i) for i in range(3))


@dataclass
class ModelParams:
    """All learnable tensors plus batch-norm running statistics."""

    config: ArchitectureConfig
    kernels: list
    conv_bias: list
    gamma: list
    beta: list
    bn_stats: list
    hidden_w: Tensor
    hidden_b: Tensor
    head_w: Tensor
    head_b: Tensor
    sensor_weights: Tensor

    def logits(self, x):
        return forward(self, x, mode="infer").logits

    def logits_past_weights(self, x1):
        return _trunk(self, x1, mode="infer", rng=None).logits

    def named_arrays(self):
        """(name, ndarray) pairs covering every persisted tensor."""
        out = []
        for i in range(3):
            out.append((f"branch{i}_kernels", self.kernels[i].data))
            out.append((f"branch{i}_bias", self.conv_bias[i].data))
            out.append((f"branch{i}_gamma", self.gamma[i].data))
            out.append((f"branch{i}_beta", self.beta[i].data))
            out.append((f"branch{i}_running_mean", self.bn_stats[i].mean))
            out.append((f"branch{i}_running_var", self.bn_stats[i].var))
        out.append(("hidden_weight", self.hidden_w.data))
        out.append(("hidden_bias", self.hidden_b.data))
        out.append(("head_weight", self.head_w.data))
        out.append(("head_bias", self.head_b.data))
        out.append(("sensor_weights", self.sensor_weights.data))
        return out

    def trainable_tensors(self):
        """Stage-one parameters: everything except the sensor weights."""
        ts = []
        for i in range(3):
            ts += [self.kernels[i], self.conv_bias[i], self.gamma[i], self.beta[i]]
        ts += [self.hidden_w, self.hidden_b, self.head_w, self.head_b]
        return ts


@dataclass(frozen=True)
class TaskOutput:
    logits: Tensor
    probabilities: Tensor


def init_params(config, rng):
    """Fan-scaled uniform weights, zero biases, identity sensor weights."""
    kernels, conv_bias, gamma, beta, stats = [], [], [], [], []
    k = config.kernels_per_branch
    for i in range(3):
        kh, kw = config.time_steps, config.branch_widths[i]
        fan_in, fan_out = 1 * kh * kw, k * kh * kw
        kernels.append(Tensor(ad.glorot_uniform(rng, (k, 1, kh, kw), fan_in, fan_out),
                              name=f"branch{i}_kernels"))
        conv_bias.append(Tensor(np.zeros(k), name=f"branch{i}_bias"))
        gamma.append(Tensor(np.ones(k), name=f"branch{i}_gamma"))
        beta.append(Tensor(np.zeros(k), name=f"branch{i}_beta"))
        stats.append(RunningStats.initial(k))
    d = config.concat_width
    hidden_w = Tensor(ad.glorot_uniform(rng, (d, config.hidden_width), d, config.hidden_width),
                      name="hidden_weight")
    hidden_b = Tensor(np.zeros(config.hidden_width), name="hidden_bias")
    head_w = Tensor(ad.glorot_uniform(rng, (config.hidden_width, config.num_tasks),
                                      config.hidden_width, config.num_tasks), name="head_weight")
    head_b = Tensor(np.zeros(config.num_tasks), name="head_bias")
    w_sensor = Tensor(np.ones(config.num_features), name="sensor_weights")
    return ModelParams(config, kernels, conv_bias, gamma, beta, stats,
                       hidden_w, hidden_b, head_w, head_b, w_sensor)


def clone_params(params):
    """Copy that shares immutable tensors but owns its running statistics."""
    return ModelParams(
        config=params.config,
        kernels=list(params.kernels),
        conv_bias=list(params.conv_bias),
        gamma=list(params.gamma),
        beta=list(params.beta),
        bn_stats=[s.copy() for s in params.bn_stats],
        hidden_w=params.hidden_w,
        hidden_b=params.hidden_b,
        head_w=params.head_w,
        head_b=params.head_b,
        sensor_weights=params.sensor_weights,
    )


def _trunk(params, x, mode, rng):
    """Everything past the sensor-weight layer, from (N, 1, T, F) to outputs."""
    cfg = params.config
    feats = []
    for i in range(3):
        y = ad.conv2d(x, params.kernels[i], params.conv_bias[i], cfg.branch_dilation(i))
        y = ad.batch_norm(y, params.gamma[i], params.beta[i], params.bn_stats[i], mode)
        y = ad.relu(y)
        y = ad.avg_pool(y, cfg.pool_window)
        n, k, h, w = y.shape
        feats.append(ad.reshape(y, (n, k * h * w)))
    z = ad.concat(feats, axis=1)
    z = ad.dropout(z, cfg.dropout_rate, mode, rng)
    z = ad.relu(ad.dense(z, params.hidden_w, params.hidden_b))
    logits = ad.dense(z, params.head_w, params.head_b)
    return TaskOutput(logits=logits, probabilities=ad.sigmoid(logits))


def forward(params, batch, mode="infer", rng=None):
    """Run the full model on a (N, 1, T, F) batch.

    Train mode uses batch statistics, updates running statistics, and
    applies dropout from ``rng``; infer mode is deterministic.
    """
    cfg = params.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch, name="input")
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"batch must be (N, 1, T, F), got {x.shape}")
    if x.shape[2] != cfg.time_steps or x.shape[3] != cfg.num_features:
        raise ShapeError(
            f"batch window {x.shape[2]}x{x.shape[3]} does not match configured "
            f"{cfg.time_steps}x{cfg.num_features}"
        )
    if x.shape[0] < 1:
        raise ShapeError("batch must contain at least one sample")
    if mode == "train" and rng is None:
        raise ValueError("train mode requires an rng for dropout")
    weighted = ad.mul(x, params.sensor_weights)
    return _trunk(params, weighted, mode, rng)


def weighted_bce(probabilities, labels, label_mask, beta):
    """Masked mean of -(beta*y*log(p) + (1-y)*log(1-p)) with p clamped.

    ``beta`` weights the positive class per task to counter imbalance;
    probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before the logs.
    """
    y = np.asarray(labels, dtype=np.float64)
    m = np.asarray(label_mask, dtype=np.float64)
    if y.shape != probabilities.shape or m.shape != probabilities.shape:
        raise ShapeError("labels and label_mask must match the probability shape")
    if not np.isin(y[m == 1], (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1 where the mask is set")
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError("label_mask must be 0 or 1")
    num_tasks = probabilities.shape[-1]
    b = np.asarray(beta, dtype=np.float64)
    if b.ndim == 0:
        b = np.full(num_tasks, float(b))
    if b.shape != (num_tasks,) or (b <= 0).any():
        raise ValueError("beta must be positive, one weight per task")
    count = m.sum()
    if count == 0:
        raise ValueError("every label in the batch is masked out")
    p = np.clip(probabilities.data, PROB_EPS, 1.0 - PROB_EPS)
    losses = -(b * y * np.log(p) + (1.0 - y) * np.log1p(-p))
    out = np.asarray((m * losses).sum() / count)

    def backward(g):
        inside = (probabilities.data >= PROB_EPS) & (probabilities.data <= 1.0 - PROB_EPS)
        d = (-(b * y) / p + (1.0 - y) / (1.0 - p)) * m * inside / count
        return (g * d,)

    def replay():
        pr = np.clip(probabilities.data, PROB_EPS, 1.0 - PROB_EPS)
        return np.asarray((m * -(b * y * np.log(pr) + (1.0 - y) * np.log1p(-pr))).sum() / count)

    return Tensor(out, op="weighted_bce", parents=(probabilities,), backward=backward, replay=replay)


def assemble_batch(samples):
    """Stack samples into model input (N, 1, T, F) plus labels and mask."""
    if not samples:
        raise ValueError("cannot assemble an empty sample list")
    x = np.stack([s.values for s in samples])[:, None, :, :]
    labels, mask = assemble_labels(samples)
    return x, labels, mask


def assemble_labels(samples):
    n = len(samples)
    k = samples[0].labels.shape[0]
    labels = np.zeros((n, k))
    mask = np.zeros((n, k))
    for i, s in enumerate(samples):
        present = s.labels >= 0
        mask[i, present] = 1.0
        labels[i, present] = s.labels[present]
    return labels, mask


def as_thresholds(thresholds, num_tasks):
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(num_tasks, float(t))
    if t.shape != (num_tasks,):
        raise ValueError(f"expected one threshold or {num_tasks}, got shape {t.shape}")
    if ((t <= 0) | (t >= 1)).any():
        raise ValueError("thresholds must lie strictly inside (0, 1)")
    return t


def predict_classes(output, thresholds):
    """Binary predictions: 1 wherever probability >= threshold."""
    probs = output.probabilities.data if isinstance(output, TaskOutput) else np.asarray(output)
    thr = as_thresholds(thresholds, probs.shape[-1])
    return (probs >= thr).astype(np.int64)


def predict_probabilities(model, samples, chunk_size=512):
    """Infer-mode probabilities (N, num_tasks) over samples or raw windows.

    ``model`` is anything exposing ``logits(x)``, so score models used as
    oracles work alongside full ModelParams.
    """
    if isinstance(samples, np.ndarray):
        x = samples[:, None, :, :] if samples.ndim == 3 else samples
    else:
        x = np.stack([s.values for s in samples])[:, None, :, :]
    parts = []
    for start in range(0, x.shape[0], chunk_size):
        logits = model.logits(Tensor(x[start:start + chunk_size], name="input"))
        parts.append(ad.sigmoid(logits).data)
    return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.01
    beta: object = None  # per-task positive weights; None derives n_neg/n_pos

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list


def _sgd_step(params, grads, lr):
    def step(t):
        return Tensor(t.data - lr * grads[t], name=t.name)

    for i in range(3):
        params.kernels[i] = step(params.kernels[i])
        params.conv_bias[i] = step(params.conv_bias[i])
        params.gamma[i] = step(params.gamma[i])
        params.beta[i] = step(params.beta[i])
    params.hidden_w = step(params.hidden_w)
    params.hidden_b = step(params.hidden_b)
    params.head_w = step(params.head_w)
    params.head_b = step(params.head_b)


def train(params, dataset, hyper, rng):
    """Stage-one minibatch SGD over every parameter except the sensor weights.

    ``dataset`` is a DatasetSplit (its train list is used) or a plain sample
    list. Returns fresh params plus the per-epoch mean loss trace; the input
    params are left untouched.
    """
    samples = dataset.train if hasattr(dataset, "train") else list(dataset)
    if not samples:
        raise ValueError("training requires a non-empty dataset")
    x, labels, mask = assemble_batch(samples)
    pos = ((labels == 1) & (mask == 1)).sum(axis=0)
    neg = ((labels == 0) & (mask == 1)).sum(axis=0)
    for k in range(labels.shape[1]):
        if pos[k] == 0 or neg[k] == 0:
            raise ValueError(
                f"task{k + 1} needs at least one positive and one negative training sample"
            )
    beta = np.asarray(hyper.beta, dtype=np.float64) if hyper.beta is not None else neg / pos

    params = clone_params(params)
    n = x.shape[0]
    losses = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        weight = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            try:
                out = forward(params, x[idx], mode="train", rng=rng)
                loss = weighted_bce(out.probabilities, labels[idx], mask[idx], beta)
                if not np.isfinite(loss.data):
                    raise NumericError("non-finite loss")
                grads = ad.grad(loss, params.trainable_tensors())
                _sgd_step(params, grads, hyper.learning_rate)
            except NumericError as exc:
                raise TrainingDivergenceError(f"training diverged at epoch {epoch}") from exc
            batch_weight = mask[idx].sum()
            total += float(loss.data) * batch_weight
            weight += batch_weight
        losses.append(float(total / weight))
    return TrainResult(params, losses)


@dataclass
class LinearProbe:
    """Minimal score model: logit = sum(weight * (sensor_weights * x)) + bias.

    Useful for checking attribution machinery against a closed form; the
    gradient of its logit with respect to the input is exactly ``weight``
    (scaled by the sensor weights).
    """

    weight: np.ndarray
    bias: float = 0.0
    sensor_weights: np.ndarray = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError("LinearProbe weight must be (T, F)")
        if self.sensor_weights is None:
            self.sensor_weights = np.ones(self.weight.shape[1])
        self.sensor_weights = np.asarray(self.sensor_weights, dtype=np.float64)

    def logits(self, x):
        x1 = ad.mul(x, Tensor(self.sensor_weights, name="sensor_weights"))
        return self.logits_past_weights(x1)

    def logits_past_weights(self, x1):
        n = x1.shape[0]
        t, f = self.weight.shape
        flat = ad.reshape(x1, (n, t * f))
        w = Tensor(self.weight.reshape(t * f, 1), name="probe_weight")
        b = Tensor(np.array([self.bias]), name="probe_bias")
        return ad.dense(flat, w, b)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
# Layout (little endian):
#   uint32  format version
#   uint32  config JSON byte length, followed by the JSON
#   payload section:
#     uint32 tensor count, then per tensor:
#       uint16 name length + UTF-8 name
#       uint8  rank, rank * uint32 extents
#       row-major float64 data
#   uint32  CRC32 of the payload section

def _encode_records(named):
    buf = bytearray()
    buf += struct.pack("<I", len(named))
    for name, arr in named:
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", a.ndim)
        if a.ndim:
            buf += struct.pack(f"<{a.ndim}I", *a.shape)
        buf += a.tobytes()
    return bytes(buf)


def save_checkpoint(path, params, scaler=None):
    cfg_bytes = json.dumps(dataclasses.asdict(params.config), sort_keys=True).encode("utf-8")
    named = params.named_arrays()
    if scaler is not None:
        named = named + [("scaler_mean", scaler.mean), ("scaler_std", scaler.std)]
    payload = _encode_records(named)
    blob = (struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<I", len(cfg_bytes)) + cfg_bytes
            + payload
            + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    atomic_write_bytes(path, blob)
    return path


class _Cursor:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_records(path):
    """Parse a checkpoint into (config dict, {name: ndarray}, {name: raw bytes}).

    Verifies the trailing CRC32 over the payload section before decoding.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    cur = _Cursor(blob, path)
    (version,) = cur.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = cur.unpack("<I")
    try:
        config = json.loads(cur.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable config block") from exc
    payload_start = cur.pos
    if len(blob) < payload_start + 4:
        raise CorruptCheckpointError(f"{path}: truncated checkpoint")
    payload = blob[payload_start:len(blob) - 4]
    (stored_crc,) = struct.unpack("<I", blob[len(blob) - 4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CorruptCheckpointError(f"{path}: CRC mismatch, checkpoint is corrupt")
    cur = _Cursor(payload, path)
    (count,) = cur.unpack("<I")
    arrays = {}
    raw = {}
    for _ in range(count):
        (name_len,) = cur.unpack("<H")
        name = cur.take(name_len).decode("utf-8")
        (rank,) = cur.unpack("<B")
        shape = cur.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        data = cur.take(size * 8)
        arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        raw[name] = data
    if cur.pos != len(payload):
        raise CorruptCheckpointError(f"{path}: trailing bytes in payload section")
    return config, arrays, raw


def load_checkpoint(path):
    """Rebuild (ModelParams, FeatureScaler or None) from a checkpoint file."""
    from .data import FeatureScaler

    config_dict, arrays, _ = read_checkpoint_records(path)
    try:
        config = ArchitectureConfig(**config_dict)
    except (TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: invalid architecture config: {exc}") from exc

    def grab(name, shape):
        if name not in arrays:
            raise CorruptCheckpointError(f"{path}: missing tensor {name!r}")
        arr = arrays.pop(name)
        if arr.shape != shape:
            raise CorruptCheckpointError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {shape}"
            )
        return arr

    k = config.kernels_per_branch
    kernels, conv_bias, gamma, beta, stats = [], [], [], [], []
    for i in range(3):
        kw = config.branch_widths[i]
        kernels.append(Tensor(grab(f"branch{i}_kernels", (k, 1, config.time_steps, kw)),
                              name=f"branch{i}_kernels"))
        conv_bias.append(Tensor(grab(f"branch{i}_bias", (k,)), name=f"branch{i}_bias"))
        gamma.append(Tensor(grab(f"branch{i}_gamma", (k,)), name=f"branch{i}_gamma"))
        beta.append(Tensor(grab(f"branch{i}_beta", (k,)), name=f"branch{i}_beta"))
        stats.append(RunningStats(grab(f"branch{i}_running_mean", (k,)),
                                  grab(f"branch{i}_running_var", (k,))))
    params = ModelParams(
        config=config,
        kernels=kernels, conv_bias=conv_bias, gamma=gamma, beta=beta, bn_stats=stats,
        hidden_w=Tensor(grab("hidden_weight", (config.concat_width, config.hidden_width)),
                        name="hidden_weight"),
        hidden_b=Tensor(grab("hidden_bias", (config.hidden_width,)), name="hidden_bias"),
        head_w=Tensor(grab("head_weight", (config.hidden_width, config.num_tasks)),
                      name="head_weight"),
        head_b=Tensor(grab("head_bias", (config.num_tasks,)), name="head_bias"),
        sensor_weights=Tensor(grab("sensor_weights", (config.num_features,)),
                              name="sensor_weights"),
    )
    scaler = None
    if "scaler_mean" in arrays and "scaler_std" in arrays:
        scaler = FeatureScaler(arrays.pop("scaler_mean"), arrays.pop("scaler_std"))
    return params, scaler
