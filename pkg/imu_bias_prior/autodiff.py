"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Operations are recorded on the innermost active :class:`Tape` (a context
manager) whenever at least one input is tracked. Without an active tape the
primitives just evaluate, which is how inference runs.

    with Tape() as tape:
        loss = l1_loss(linear(x, w, b), target)
    grads = tape.backward(loss, wrt=[w, b])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a primitive."""


def _shape_error(op: str, *shapes: Tuple[int, ...]) -> ShapeError:
    rendered = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {rendered}")


@dataclass(eq=False)
class Tensor:
    """Dense row-major float64 array with optional gradient tracking."""

    data: np.ndarray
    requires_grad: bool = False
    name: str = ""
    grad: Optional[np.ndarray] = None
    _tracked: bool = field(default=False, repr=False)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        self._tracked = self._tracked or self.requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


@dataclass(eq=False)
class _Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn
    op: str


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Topologically ordered record of primitive applications."""

    def __init__(self) -> None:
        self.nodes: List[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def backward(
        self, loss: Tensor, wrt: Optional[Sequence[Tensor]] = None
    ) -> Dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss`` for every tracked leaf on this tape.

        Leaves listed in ``wrt`` that the loss does not reach get zeros. Each
        leaf's ``grad`` attribute is set to its gradient.
        """

        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = adjoints.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g_in in zip(node.inputs, node.backward(g_out)):
                if g_in is None or not inp._tracked:
                    continue
                key = id(inp)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + g_in
                else:
                    adjoints[key] = g_in
                if inp.requires_grad:
                    leaves[key] = inp
        result: Dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            result[leaf] = adjoints.get(key, np.zeros_like(leaf.data))
        if loss.requires_grad and id(loss) not in leaves:
            result[loss] = np.ones_like(loss.data)
        for leaf in wrt or ():
            if leaf not in result:
                result[leaf] = np.zeros_like(leaf.data)
        for leaf, grad in result.items():
            leaf.grad = grad
        return result


def backward(loss: Tensor, tape: Tape, wrt: Optional[Sequence[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    return tape.backward(loss, wrt)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.record(_Node(out, tuple(inputs), backward_fn, op))
    return out


def _as_tensor(value: Union[Tensor, np.ndarray, float]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


# ----------------------------------------------------------------------
# Elementwise and linear algebra
# ----------------------------------------------------------------------
def _check_bias_add(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return
    raise _shape_error(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-shape bias."""

    _check_bias_add("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_add("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` with equal leading dims, or ``b`` a plain matrix."""

    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise _shape_error("matmul", a.shape, b.shape)

    def backward_fn(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (out, in)."""

    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise _shape_error("linear", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _shape_error("linear", weight.shape, bias.shape)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g: np.ndarray):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit("linear", out, inputs, backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""

    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), backward_fn)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        count = x.data.size
        return _emit("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / count),))
    axis = axis % x.ndim
    count = x.shape[axis]

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).copy(),)

    return _emit("mean", x.data.mean(axis=axis), (x,), backward_fn)


def l1_loss(pred: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean absolute error; the subgradient at ties is zero."""

    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise _shape_error("l1_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    count = diff.size

    def backward_fn(g: np.ndarray):
        s = np.sign(diff) * (g / count)
        return s, -s

    return _emit("l1_loss", np.array(np.abs(diff).mean()), (pred, target), backward_fn)


# ----------------------------------------------------------------------
# Shape manipulation
# ----------------------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise _shape_error("reshape", x.shape, tuple(shape)) from exc
    return _emit("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise _shape_error("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start + length)`` along ``axis``."""

    axis = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: range [{start}, {start + length}) out of bounds for shape {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index_t = tuple(index)

    def backward_fn(g: np.ndarray):
        out = np.zeros_like(x.data)
        out[index_t] = g
        return (out,)

    return _emit("narrow", x.data[index_t], (x,), backward_fn)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Drop ``axis`` by taking position ``index``."""

    axis = axis % x.ndim
    if not 0 <= index < x.shape[axis]:
        raise ShapeError(f"select: index {index} out of bounds for shape {x.shape}")

    def backward_fn(g: np.ndarray):
        out = np.zeros_like(x.data)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        out[tuple(slicer)] = g
        return (out,)

    return _emit("select", np.take(x.data, index, axis=axis), (x,), backward_fn)


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in items}
    if len(shapes) != 1:
        raise _shape_error("stack", *sorted(shapes))
    data = np.stack([t.data for t in items], axis=axis)
    axis_n = axis % data.ndim

    def backward_fn(g: np.ndarray):
        return tuple(np.take(g, i, axis=axis_n) for i in range(len(items)))

    return _emit("stack", data, tuple(items), backward_fn)


def concat(items: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in items], axis=axis)
    axis_n = axis % data.ndim
    bounds = np.cumsum([t.shape[axis_n] for t in items])[:-1]

    def backward_fn(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis_n))

    return _emit("concat", data, tuple(items), backward_fn)


# ----------------------------------------------------------------------
# Network layers
# ----------------------------------------------------------------------
def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 convolution of (B, C_in, L) with zero padding ``K // 2`` per side.

    ``weight`` is (C_out, C_in, K) with odd ``K`` so the length is preserved.
    """

    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise _shape_error("conv1d", x.shape, weight.shape)
    kernel = weight.shape[2]
    if kernel % 2 == 0:
        raise ShapeError(f"conv1d: kernel size must be odd, got {kernel}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _shape_error("conv1d", weight.shape, bias.shape)
    pad = kernel // 2
    length = x.shape[2]
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    windows = sliding_window_view(padded, kernel, axis=2)
    out = np.einsum("bclk,ock->bol", windows, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g: np.ndarray):
        gw = np.einsum("bclk,bol->ock", windows, g, optimize=True)
        gwin = np.einsum("ock,bol->bclk", weight.data, g, optimize=True)
        gpad = np.zeros_like(padded)
        for k in range(kernel):
            gpad[:, :, k : k + length] += gwin[..., k]
        gx = gpad[:, :, pad : pad + length]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _emit("conv1d", out, inputs, backward_fn)


def maxpool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling over the last axis; length ``floor(L / window)``."""

    if window < 1 or x.shape[-1] < window:
        raise ShapeError(f"maxpool1d: window {window} invalid for shape {x.shape}")
    out_len = x.shape[-1] // window
    used = out_len * window
    blocks = x.data[..., :used].reshape(*x.shape[:-1], out_len, window)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray):
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[..., :used] = gblocks.reshape(*x.shape[:-1], used)
        return (gx,)

    return _emit("maxpool1d", y, (x,), backward_fn)


def _channel_view(param: np.ndarray, ndim: int) -> np.ndarray:
    return param.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU with one learnable slope per channel (axis 1)."""

    if x.ndim < 2 or slope.shape != (x.shape[1],):
        raise _shape_error("prelu", x.shape, slope.shape)
    a = _channel_view(slope.data, x.ndim)
    positive = x.data > 0
    y = np.where(positive, x.data, a * x.data)
    reduce_axes = tuple(i for i in range(x.ndim) if i != 1)

    def backward_fn(g: np.ndarray):
        gx = np.where(positive, g, a * g)
        ga = np.where(positive, 0.0, g * x.data).sum(axis=reduce_axes)
        return gx, ga

    return _emit("prelu", y, (x, slope), backward_fn)


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Batch normalization over (B, C, L) per channel.

    In training mode batch statistics are used and, unless ``update_running``
    is false, the running buffers are updated in place (unbiased variance); in
    eval mode the layer is the affine map defined by the running buffers.
    """

    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise _shape_error("batchnorm1d", x.shape, gamma.shape)
    axes = (0, 2)
    g_view = _channel_view(gamma.data, 3)
    if training:
        count = x.shape[0] * x.shape[2]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if count > 1 and update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - _channel_view(mu, 3)) * _channel_view(inv_std, 3)
    y = g_view * x_hat + _channel_view(beta.data, 3)

    def backward_fn(g: np.ndarray):
        g_gamma = (g * x_hat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_hat = g * g_view
        if training:
            gx = _channel_view(inv_std, 3) * (
                g_hat
                - g_hat.mean(axis=axes, keepdims=True)
                - x_hat * (g_hat * x_hat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = g_hat * _channel_view(inv_std, 3)
        return gx, g_gamma, g_beta

    return _emit("batchnorm1d", y, (x, gamma, beta), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with an elementwise affine map."""

    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise _shape_error("layer_norm", x.shape, gamma.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    x_hat = (x.data - mu) * inv_std
    y = x_hat * gamma.data + beta.data

    def backward_fn(g: np.ndarray):
        g_hat = g * gamma.data
        gx = inv_std * (
            g_hat - g_hat.mean(axis=-1, keepdims=True) - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        flat = g.reshape(-1, g.shape[-1])
        return gx, (flat * x_hat.reshape(flat.shape)).sum(axis=0), flat.sum(axis=0)

    return _emit("layer_norm", y, (x, gamma, beta), backward_fn)


# ----------------------------------------------------------------------
# Optimizers
# ----------------------------------------------------------------------
RMSPROP_DECAY = 0.99
ADAM_BETAS = (0.9, 0.999)
OPTIMIZER_EPS = 1e-8


@dataclass
class OptimizerState:
    """Per-parameter moment buffers, indexed by parameter position."""

    kind: str
    step: int = 0
    first: List[np.ndarray] = field(default_factory=list)
    second: List[np.ndarray] = field(default_factory=list)


ParamLike = Union[Tensor, np.ndarray]


def _param_array(p: ParamLike) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else p


def optimizer_step(
    kind: str,
    params: Sequence[ParamLike],
    grads: Sequence[np.ndarray],
    state: Optional[OptimizerState],
    lr: float,
) -> OptimizerState:
    """Apply one RMSprop or Adam update to ``params`` in place."""

    if kind not in ("rmsprop", "adam"):
        raise ValueError(f"Unsupported optimizer kind: {kind}")
    if len(params) != len(grads):
        raise ShapeError(f"optimizer_step: {len(params)} params but {len(grads)} gradients")
    state = state or OptimizerState(kind=kind)
    if state.kind != kind:
        raise ValueError(f"Optimizer state was created for {state.kind}, not {kind}")
    arrays = [_param_array(p) for p in params]
    if not state.second:
        state.first = [np.zeros_like(a) for a in arrays]
        state.second = [np.zeros_like(a) for a in arrays]
    state.step += 1

    for i, (param, grad) in enumerate(zip(arrays, grads)):
        if param.shape != grad.shape:
            raise _shape_error("optimizer_step", param.shape, grad.shape)
        if kind == "rmsprop":
            sq = state.second[i]
            sq *= RMSPROP_DECAY
            sq += (1.0 - RMSPROP_DECAY) * grad * grad
            param -= lr * grad / (np.sqrt(sq) + OPTIMIZER_EPS)
        else:
            b1, b2 = ADAM_BETAS
            m, v = state.first[i], state.second[i]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            m_hat = m / (1.0 - b1**state.step)
            v_hat = v / (1.0 - b2**state.step)
            param -= lr * m_hat / (np.sqrt(v_hat) + OPTIMIZER_EPS)
    return state


def finite_difference_gradient(
    fn: Callable[[], float], array: np.ndarray, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of ``fn()`` w.r.t. ``array`` (perturbed in place)."""

    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = fn()
        flat[i] = original - h
        f_minus = fn()
        flat[i] = original
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


__all__ = [
    "OptimizerState",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "batchnorm1d",
    "concat",
    "conv1d",
    "finite_difference_gradient",
    "l1_loss",
    "layer_norm",
    "linear",
    "matmul",
    "maxpool1d",
    "mean",
    "mul",
    "narrow",
    "optimizer_step",
    "prelu",
    "reshape",
    "scale",
    "select",
    "sigmoid",
    "softmax",
    "stack",
    "sub",
    "tanh",
    "tensor",
    "transpose",
]
