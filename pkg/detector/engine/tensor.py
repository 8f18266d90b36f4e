"""
Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the active ``GradTape`` when at least one
input requires a gradient:

    >>> with GradTape() as tape:
    ...     loss = (x @ w).sum()
    >>> backward(tape, loss)

Outside a tape nothing is recorded, which keeps inference and
finite-difference evaluations cheap.
"""
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, DimensionError

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: ContextVar[Optional["GradTape"]] = ContextVar("avfm_active_tape", default=None)

LAYERNORM_EPS = 1e-5
GROUPNORM_EPS = 1e-5


class Tensor:
    """Row-major float64 array that can take part in a gradient tape"""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self.tape: Optional["GradTape"] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(array, dtype=np.float64)
        out.grad = None
        out.requires_grad = False
        out.tape_id = None
        out.tape = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class TapeNode:
    inputs: tuple
    output: Tensor
    backward: BackwardFn


class GradTape:
    """Ordered record of differentiable operations"""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple, output: Tensor, backward_fn: BackwardFn):
        output.requires_grad = True
        output.tape = self
        output.tape_id = len(self.nodes)
        self.nodes.append(TapeNode(inputs, output, backward_fn))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    out = Tensor._wrap(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: GradTape, loss: Tensor):
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Nodes are replayed in reverse recording order, which is a reverse
    topological order. Leaf gradients accumulate across calls until
    ``zero_grad`` is called.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape or loss.tape_id is None:
        raise ContractError("loss was not recorded on this tape")

    pending = {loss.tape_id: np.ones_like(loss.data)}
    for index in range(loss.tape_id, -1, -1):
        grad = pending.pop(index, None)
        if grad is None:
            continue
        node = tape.nodes[index]
        for tensor, input_grad in zip(node.inputs, node.backward(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            if tensor.tape is tape:
                previous = pending.get(tensor.tape_id)
                pending[tensor.tape_id] = input_grad if previous is None else previous + input_grad
            else:
                tensor.grad = np.array(input_grad, dtype=np.float64) if tensor.grad is None else tensor.grad + input_grad


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), _backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def power(x: Tensor, exponent: Number) -> Tensor:
    def _backward(g):
        if exponent == 0:
            return (np.zeros_like(x.data),)
        return (g * exponent * np.power(x.data, exponent - 1),)

    return _result(np.power(x.data, exponent), (x,), _backward)


def clip(x: Tensor, low: Number, high: Number) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)
    return _result(np.clip(x.data, low, high), (x,), lambda g: (g * inside,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), stable for large |x|"""
    slope = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(np.logaddexp(0.0, x.data), (x,), lambda g: (g * slope,))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _result(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    inner = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return _result(out, (x,), _backward)


# Reductions and shape plumbing

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), _backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1) if axis is not None else x.data.size

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(out, (x,), _backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, key) -> Tensor:
    def _backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(x.data[key]), (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward)


# Linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product; leading batch axes broadcast as in ``np.matmul``"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), _backward)


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), _backward)


def _normalize(rows: np.ndarray, eps: float):
    centered = rows - rows.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    return centered * inv_std, inv_std


def _normalize_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    return inv_std * (
        g_hat
        - g_hat.mean(axis=-1, keepdims=True)
        - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
    )


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layernorm affine {gamma.shape}/{beta.shape} does not match {x.shape}")
    x_hat, inv_std = _normalize(x.data, eps)

    def _backward(g):
        lead = tuple(range(x.ndim - 1))
        return (
            _normalize_backward(g * gamma.data, x_hat, inv_std),
            (g * x_hat).sum(axis=lead),
            g.sum(axis=lead),
        )

    return _result(x_hat * gamma.data + beta.data, (x, gamma, beta), _backward)


def groupnorm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = GROUPNORM_EPS) -> Tensor:
    channels = x.shape[0]
    if groups < 1 or channels % groups != 0:
        raise ConfigurationError(f"{channels} channels cannot be split into {groups} groups")
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"groupnorm affine {gamma.shape}/{beta.shape} does not match {channels} channels")

    x_hat, inv_std = _normalize(x.data.reshape(groups, -1), eps)
    x_hat = x_hat.reshape(x.shape)
    scale = gamma.data[:, None, None]

    def _backward(g):
        g_hat = (g * scale).reshape(groups, -1)
        gx = _normalize_backward(g_hat, x_hat.reshape(groups, -1), inv_std).reshape(x.shape)
        return gx, (g * x_hat).sum(axis=(1, 2)), g.sum(axis=(1, 2))

    return _result(x_hat * scale + beta.data[:, None, None], (x, gamma, beta), _backward)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of a [C×H×W] map with [C'×C×kh×kw] kernels"""
    channels, height, width = x.shape
    out_channels, in_channels, kh, kw = kernels.shape
    if in_channels != channels:
        raise DimensionError(f"conv2d kernels {kernels.shape} do not match input {x.shape}")
    if bias.shape != (out_channels,):
        raise DimensionError(f"conv2d bias {bias.shape} does not match {out_channels} output channels")
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    if kh > padded.shape[1] or kw > padded.shape[2]:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {padded.shape[1:]}")

    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out_h, out_w = windows.shape[1], windows.shape[2]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, channels * kh * kw)
    kmat = kernels.data.reshape(out_channels, -1)
    out = (kmat @ cols.T).reshape(out_channels, out_h, out_w) + bias.data[:, None, None]

    def _backward(g):
        g2 = g.reshape(out_channels, -1)
        g_kernels = (g2 @ cols).reshape(kernels.shape)
        g_cols = (kmat.T @ g2).reshape(channels, kh, kw, out_h, out_w)
        g_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                g_padded[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += g_cols[:, i, j]
        gx = g_padded[:, padding:padding + height, padding:padding + width]
        return gx, g_kernels, g2.sum(axis=1)

    return _result(out, (x, kernels, bias), _backward)


def interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Half-pixel-centre linear interpolation weights, shape [out×in]"""
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.maximum(src, 0.0)
    lower = np.minimum(np.floor(src).astype(int), in_size - 1)
    upper = np.minimum(lower + 1, in_size - 1)
    frac = src - lower
    weights = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(weights, (rows, lower), 1.0 - frac)
    np.add.at(weights, (rows, upper), frac)
    return weights


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners-false bilinear resize of a [C×H×W] map"""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    _, height, width = x.shape
    if (height, width) == (out_h, out_w):
        return _result(x.data.copy(), (x,), lambda g: (g,))

    rows = interpolation_matrix(height, out_h)
    cols = interpolation_matrix(width, out_w)
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return _result(out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),))
