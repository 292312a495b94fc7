"""Reverse-mode differentiation over dense rank-<=4 float64 arrays.

Operations build an implicit computation graph out of ``Tensor`` nodes.
``ComputationRecord`` linearizes the graph reachable from an output and can
replay every recorded application bit-exactly; ``backward`` walks the record
in reverse to accumulate gradients for any subset of participating tensors.
Everything runs on plain numpy in float64 so that finite-difference
verification is meaningful at tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand extents incompatible with the requested operation."""


class GeometryError(ValueError):
    """A window or dilated receptive field does not fit its input."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class Tensor:
    """Immutable float64 array node in a computation graph.

    ``parents`` and the backward/replay closures are populated by the
    operations in this module; leaf tensors have neither. The backward
    closure maps the upstream gradient to one gradient array per parent
    (``None`` for non-differentiable parents); the replay closure recomputes
    the node's data from its parents' recorded data.
    """

    __slots__ = ("data", "name", "op", "parents", "_backward", "_replay")

    def __init__(self, data, name=None, *, op="leaf", parents=(), backward=None, replay=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"rank-{arr.ndim} tensor exceeds the supported maximum rank 4")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or op}")
        self.data = arr
        self.name = name
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        self._replay = replay

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor({self.name or self.op}, shape={self.data.shape})"


@dataclass
class RunningStats:
    """Per-channel running mean/variance buffers for batch normalization."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def initial(cls, channels, momentum=BN_MOMENTUM):
        return cls(np.zeros(channels), np.ones(channels), momentum)

    def copy(self):
        return RunningStats(self.mean.copy(), self.var.copy(), self.momentum)


def _node(data, op, parents, backward, replay):
    return Tensor(data, op=op, parents=parents, backward=backward, replay=replay)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(grad.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# convolution / pooling / dense
# ---------------------------------------------------------------------------

def _conv_windows(xd, kh, kw, dh, dw):
    n, c, h, w = xd.shape
    h_out = h - (kh - 1) * dh
    w_out = w - (kw - 1) * dw
    xd = np.ascontiguousarray(xd)
    s0, s1, s2, s3 = xd.strides
    return as_strided(
        xd,
        shape=(n, c, h_out, w_out, kh, kw),
        strides=(s0, s1, s2, s3, s2 * dh, s3 * dw),
        writeable=False,
    )


def _conv_forward(xd, kd, bd, dh, dw):
    windows = _conv_windows(xd, kd.shape[2], kd.shape[3], dh, dw)
    return np.einsum("ncijab,kcab->nkij", windows, kd) + bd[None, :, None, None]


def conv2d(x, kernels, bias, dilation=(1, 1)):
    """Valid-padding 2-D convolution with per-axis dilation.

    ``x`` is (N, C, H, W), ``kernels`` is (K, C, kh, kw), ``bias`` is (K,).
    Output cell (n, k, i, j) sums kernels[k, c, a, b] * x[n, c, i + a*dh,
    j + b*dw] plus bias[k]. Dilation (1, 1) is a standard convolution.
    """
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and kernels")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeError(f"kernel channels {ck} do not match input channels {c}")
    if bias.shape != (k,):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel count {k}")
    dh, dw = int(dilation[0]), int(dilation[1])
    if dh < 1 or dw < 1:
        raise ShapeError("dilation rates must be positive integers")
    if (kh - 1) * dh + 1 > h or (kw - 1) * dw + 1 > w:
        raise GeometryError(
            f"dilated receptive field ({(kh - 1) * dh + 1}x{(kw - 1) * dw + 1}) "
            f"exceeds input ({h}x{w})"
        )
    out = _conv_forward(x.data, kernels.data, bias.data, dh, dw)
    h_out, w_out = out.shape[2], out.shape[3]

    def backward(g):
        gx = np.zeros_like(x.data)
        for a in range(kh):
            for b in range(kw):
                gx[:, :, a * dh:a * dh + h_out, b * dw:b * dw + w_out] += np.einsum(
                    "nkij,kc->ncij", g, kernels.data[:, :, a, b]
                )
        windows = _conv_windows(x.data, kh, kw, dh, dw)
        gk = np.einsum("nkij,ncijab->kcab", g, windows)
        gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    def replay():
        return _conv_forward(x.data, kernels.data, bias.data, dh, dw)

    return _node(out, "conv2d", (x, kernels, bias), backward, replay)


def _bn_train_kernel(xd, gd, bd):
    mu = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    s = np.sqrt(np.maximum(var, BN_EPS))
    xhat = (xd - mu[None, :, None, None]) / s[None, :, None, None]
    out = gd[None, :, None, None] * xhat + bd[None, :, None, None]
    return out, mu, var, s, xhat


def batch_norm(x, gamma, beta, stats, mode):
    """Channel-wise batch normalization over a (N, C, H, W) tensor.

    Train mode normalizes by batch statistics (variance floored at
    ``BN_EPS``) and updates ``stats`` in place by its momentum; infer mode
    normalizes by the running statistics captured at call time.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if x.data.ndim != 4:
        raise ShapeError("batch_norm expects a rank-4 input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta extents must match the channel extent")

    if mode == "train":
        if x.shape[0] == 0:
            raise ValueError("batch_norm cannot use batch statistics on a zero-size batch")
        out, mu, var, s, xhat = _bn_train_kernel(x.data, gamma.data, beta.data)
        m = stats.momentum
        stats.mean = (1.0 - m) * stats.mean + m * mu
        stats.var = (1.0 - m) * stats.var + m * var
        active = (var > BN_EPS).astype(np.float64)[None, :, None, None]
        sb = s[None, :, None, None]

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            gh = g * gamma.data[None, :, None, None]
            mean_gh = gh.mean(axis=(0, 2, 3), keepdims=True)
            mean_ghx = (gh * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = (gh - mean_gh - active * xhat * mean_ghx) / sb
            return gx, dgamma, dbeta

        def replay():
            return _bn_train_kernel(x.data, gamma.data, beta.data)[0]

        return _node(out, "batch_norm", (x, gamma, beta), backward, replay)

    rm = stats.mean.copy()
    rs = np.sqrt(np.maximum(stats.var, BN_EPS))
    xhat = (x.data - rm[None, :, None, None]) / rs[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = g * (gamma.data / rs)[None, :, None, None]
        return gx, dgamma, dbeta

    def replay():
        return gamma.data[None, :, None, None] * (x.data - rm[None, :, None, None]) / rs[None, :, None, None] + beta.data[None, :, None, None]

    return _node(out, "batch_norm", (x, gamma, beta), backward, replay)


def avg_pool(x, window):
    """Non-overlapping mean pooling with floor truncation of ragged edges."""
    if x.data.ndim != 4:
        raise ShapeError("avg_pool expects a rank-4 input")
    n, c, h, w = x.shape
    ph, pw = int(window[0]), int(window[1])
    if ph < 1 or pw < 1:
        raise ShapeError("pooling window extents must be positive")
    if ph > h or pw > w:
        raise GeometryError(f"pooling window ({ph}x{pw}) larger than input ({h}x{w})")
    h_out, w_out = h // ph, w // pw

    def kernel(xd):
        trimmed = xd[:, :, :h_out * ph, :w_out * pw]
        return trimmed.reshape(n, c, h_out, ph, w_out, pw).mean(axis=(3, 5))

    out = kernel(x.data)

    def backward(g):
        gx = np.zeros_like(x.data)
        expanded = np.broadcast_to(
            (g / (ph * pw))[:, :, :, None, :, None], (n, c, h_out, ph, w_out, pw)
        )
        gx[:, :, :h_out * ph, :w_out * pw] = expanded.reshape(n, c, h_out * ph, w_out * pw)
        return (gx,)

    return _node(out, "avg_pool", (x,), backward, lambda: kernel(x.data))


def dense(x, weight, bias):
    """Affine map: (N, D) @ (D, M) + (M,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError("dense expects rank-2 input/weight and rank-1 bias")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"inner extents disagree: {x.shape[1]} vs {weight.shape[0]}")
    if bias.shape[0] != weight.shape[1]:
        raise ShapeError(f"bias extent {bias.shape[0]} does not match output width {weight.shape[1]}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(out, "dense", (x, weight, bias), backward, lambda: x.data @ weight.data + bias.data)


# ---------------------------------------------------------------------------
# pointwise and structural ops
# ---------------------------------------------------------------------------

def relu(x):
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0.0),)

    return _node(out, "relu", (x,), backward, lambda: np.maximum(x.data, 0.0))


def _sigmoid_kernel(xd):
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    out = _sigmoid_kernel(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, "sigmoid", (x,), backward, lambda: _sigmoid_kernel(x.data))


def concat(tensors, axis):
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat requires at least one input")
    rank = tensors[0].data.ndim
    if axis < 0 or axis >= rank:
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    for t in tensors[1:]:
        if t.data.ndim != rank:
            raise ShapeError("concat inputs must share rank")
        for ax in range(rank):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(
                    f"concat inputs disagree on axis {ax}: {t.shape[ax]} vs {tensors[0].shape[ax]}"
                )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(out, "concat", tensors, backward,
                 lambda: np.concatenate([t.data for t in tensors], axis=axis))


def dropout(x, rate, mode, rng=None):
    """Inverted dropout: train mode zeroes cells with probability ``rate``
    and scales survivors by 1/(1-rate); infer mode is the identity (the
    input tensor is returned unchanged). ``rate`` 0 never draws from ``rng``.
    """
    rate = float(rate)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout requires an rng")
    keep = rng.random(x.shape) >= rate
    scale_ = 1.0 / (1.0 - rate)
    out = x.data * keep * scale_

    def backward(g):
        return (g * keep * scale_,)

    return _node(out, "dropout", (x,), backward, lambda: x.data * keep * scale_)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _node(out, "mul", (a, b), backward, lambda: a.data * b.data)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _node(out, "reshape", (x,), backward, lambda: x.data.reshape(shape))


def take_column(x, column):
    """Select column ``column`` of a rank-2 tensor as a rank-1 tensor."""
    if x.data.ndim != 2:
        raise ShapeError("take_column expects a rank-2 input")
    if not 0 <= column < x.shape[1]:
        raise ShapeError(f"column {column} out of range for width {x.shape[1]}")
    out = x.data[:, column].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, column] = g
        return (gx,)

    return _node(out, "take_column", (x,), backward, lambda: x.data[:, column].copy())


def scale(x, factor):
    factor = float(factor)
    if not np.isfinite(factor):
        raise ValueError("scale factor must be finite")
    out = x.data * factor

    def backward(g):
        return (g * factor,)

    return _node(out, "scale", (x,), backward, lambda: x.data * factor)


def sum_all(x):
    """Sum every element into a rank-0 tensor."""
    out = np.asarray(x.data.sum())

    def backward(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _node(out, "sum_all", (x,), backward, lambda: np.asarray(x.data.sum()))


# ---------------------------------------------------------------------------
# record / backward
# ---------------------------------------------------------------------------

class ComputationRecord:
    """Topologically ordered op applications reachable from ``root``.

    ``nodes`` lists every non-leaf tensor with all operands preceding their
    use; ``replay`` recomputes each application from its recorded operands
    and reports whether every output is reproduced bit-exactly.
    """

    def __init__(self, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                stack.append((parent, False))
        self.root = root
        self.nodes = [n for n in order if n.parents]

    def replay(self):
        for node in self.nodes:
            if node._replay is None:
                return False
            fresh = np.asarray(node._replay(), dtype=np.float64)
            if fresh.shape != node.data.shape or fresh.tobytes() != node.data.tobytes():
                return False
        return True


class GradientSet:
    """Mapping from requested tensors to gradient arrays of identical shape."""

    def __init__(self, grads):
        for t, g in grads.items():
            if g.shape != t.data.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
        self._grads = dict(grads)

    def __getitem__(self, tensor):
        return self._grads[tensor]

    def __contains__(self, tensor):
        return tensor in self._grads

    def __len__(self):
        return len(self._grads)

    def items(self):
        return self._grads.items()


def backward(record, output, wrt):
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors that did not participate in the recorded computation receive
    all-zero gradients of their own shape.
    """
    wrt = tuple(wrt)
    if output.data.size != 1:
        raise ShapeError("backward requires a scalar output")
    wanted = set(wrt)
    adjoint = {output: np.ones_like(output.data)}
    saved = {}
    for node in reversed(record.nodes):
        g = adjoint.pop(node, None)
        if g is None:
            continue
        if node in wanted:
            saved[node] = g
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None:
                continue
            acc = adjoint.get(parent)
            adjoint[parent] = pg if acc is None else acc + pg
    grads = {}
    for t in wrt:
        g = saved.get(t)
        if g is None:
            g = adjoint.get(t)
        if g is None:
            g = np.zeros_like(t.data)
        grads[t] = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    return GradientSet(grads)


def grad(output, wrt):
    """Record the graph below ``output`` and run ``backward`` over it."""
    return backward(ComputationRecord(output), output, wrt)


def glorot_uniform(rng, shape, fan_in, fan_out):
    """Fan-scaled uniform draw: U(-s, s) with s = sqrt(6 / (fan_in + fan_out))."""
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)
