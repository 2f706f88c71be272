"""Dense NCHW tensors with reverse-mode automatic differentiation.

Only the operator set needed by the segmentation network is provided:
convolutions (plain, dilated, transposed), 2x2 max pooling, batch and layer
normalization, axis-set softmax, pointwise activations, channel split and
concatenation, and the handful of reductions used by the losses.

Every op records a closure mapping the output gradient to one gradient per
parent. ``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import logging
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf, expit

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_AXIS_NAMES = {"C": 1, "H": 2, "W": 3}

_grad_enabled = True
_warned_untracked = False
_flop_log: list | None = None
_scope: list[str] = []


class DimensionError(ValueError):
    """Shape mismatch; ``axis`` names the offending axis when known."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class GradientError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def name_scope(name: str):
    _scope.append(name)
    try:
        yield
    finally:
        _scope.pop()


@contextlib.contextmanager
def record_flops():
    """Collect ``(scope, op, flops)`` records for every op run inside the block."""
    global _flop_log
    prev = _flop_log
    log: list = []
    _flop_log = log
    try:
        yield log
    finally:
        _flop_log = prev


def _record(op: str, flops: int) -> None:
    if _flop_log is not None:
        _flop_log.append((_scope[-1] if _scope else "", op, int(flops)))


# per-element costs used by the FLOP counter; convolutions are counted as
# 2 FLOPs per multiply-accumulate
ELEMENTWISE_COST = {
    "add": 1,
    "sub": 1,
    "mul": 1,
    "div": 1,
    "relu": 1,
    "sigmoid": 4,
    "gelu": 8,
    "batch_norm": 2,
    "layer_norm": 5,
    "softmax": 3,
    "max_pool2d": 3,
}


class Tensor:
    """An ndarray with an optional gradient slot and a link to its producer.

    Feature maps are NCHW; weights and biases reuse the same class with
    their natural rank.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_freed", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._freed = False
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every grad-tracking t upstream.

        Unless ``retain_graph`` is set the recorded closures are dropped, and a
        second call on the same graph raises ``GradientError``.
        """
        if self.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise GradientError("graph already freed by a previous backward; pass retain_graph=True")
        if not self.requires_grad:
            raise GradientError("loss does not depend on any tensor that requires grad")

        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            if not retain_graph:
                node._backward = None
                node._parents = ()
                node._freed = True

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        # float arrays keep their precision; everything else gets the default
        floating = isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64)
        dtype = x.dtype if floating else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# elementwise ----------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _record("add", max(a.size, b.size))
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _record("sub", max(a.size, b.size))
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _record("mul", max(a.size, b.size))
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _record("div", max(a.size, b.size))
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), backward, "div")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / n)


# activations ----------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    _record("relu", x.size)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    _record("sigmoid", x.size)
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    _record("gelu", x.size)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _make((x.data * cdf).astype(x.dtype), (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def softmax_axes(x: Tensor, axes: Iterable) -> Tensor:
    """Softmax over the flattened axis set, independently per complementary index.

    ``axes`` holds axis names ("C", "H", "W") or their NCHW indices.
    """
    idx = []
    for a in axes:
        a = _AXIS_NAMES.get(a, a) if isinstance(a, str) else a
        if a not in (1, 2, 3):
            raise ValueError(f"softmax axis must be one of C/H/W, got {a!r}")
        idx.append(a)
    if not idx:
        raise ValueError("softmax needs a non-empty axis set")
    ax = tuple(sorted(set(idx)))
    _record("softmax", x.size)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


# channel plumbing -------------------------------------------------------------
def channel_split(x: Tensor, parts: int = 4) -> list[Tensor]:
    c = x.shape[1]
    if c % parts:
        raise DimensionError(f"{c} channels cannot be split into {parts} equal chunks", axis="C")
    step = c // parts
    return [_channel_slice(x, i * step, (i + 1) * step) for i in range(parts)]


def _channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), backward, "channel_slice")


def channel_concat(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("nothing to concatenate")
    ref = parts[0].shape
    for p in parts[1:]:
        for ax, name in ((0, "N"), (2, "H"), (3, "W")):
            if p.shape[ax] != ref[ax]:
                raise DimensionError(
                    f"concat parts disagree on {name}: {p.shape[ax]} vs {ref[ax]}", axis=name
                )
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward, "concat")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), backward, "upsample_nearest")


# convolution ------------------------------------------------------------------
def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def conv_output_size(size: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _windows(xp, kh, kw, stride, dil, oh, ow):
    n, c = xp.shape[:2]
    s_n, s_c, s_h, s_w = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s_n, s_c, s_h * dil[0], s_w * dil[1], s_h * stride[0], s_w * stride[1]),
        writeable=False,
    )


def _pad(x, pad):
    if pad == (0, 0):
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))


def _conv_forward(x, w, stride, pad, dil):
    kh, kw = w.shape[2:]
    oh = conv_output_size(x.shape[2], kh, stride[0], pad[0], dil[0])
    ow = conv_output_size(x.shape[3], kw, stride[1], pad[1], dil[1])
    cols = _windows(_pad(x, pad), kh, kw, stride, dil, oh, ow)
    out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))  # N, oh, ow, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def _conv_backward_input(g, w, x_shape, stride, pad, dil):
    n, c, h, wd = x_shape
    kh, kw = w.shape[2:]
    oh, ow = g.shape[2:]
    gcols = np.tensordot(w, g, axes=([0], [1]))  # C, kh, kw, N, oh, ow
    gx = np.zeros((n, c, h + 2 * pad[0], wd + 2 * pad[1]), dtype=g.dtype)
    for i in range(kh):
        r0 = i * dil[0]
        for j in range(kw):
            c0 = j * dil[1]
            gx[:, :, r0 : r0 + stride[0] * (oh - 1) + 1 : stride[0], c0 : c0 + stride[1] * (ow - 1) + 1 : stride[1]] += (
                gcols[:, i, j].transpose(1, 0, 2, 3)
            )
    return gx[:, :, pad[0] : pad[0] + h, pad[1] : pad[1] + wd]


def _conv_backward_weight(cols, g):
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # O, C, kh, kw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1) -> Tensor:
    """Cross-correlation of an NCHW input with an (O, C, kh, kw) weight."""
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got rank {x.ndim}", axis="rank")
    if weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv2d weight expects {weight.shape[1]} input channels, input has {x.shape[1]}", axis="C"
        )
    kh, kw = weight.shape[2:]
    oh = conv_output_size(x.shape[2], kh, stride[0], padding[0], dilation[0])
    ow = conv_output_size(x.shape[3], kw, stride[1], padding[1], dilation[1])
    if oh < 1:
        raise DimensionError(f"conv2d output height {oh} < 1", axis="H")
    if ow < 1:
        raise DimensionError(f"conv2d output width {ow} < 1", axis="W")

    out, cols = _conv_forward(x.data, weight.data, stride, padding, dilation)
    _record("conv2d", 2 * x.shape[0] * weight.shape[0] * weight.shape[1] * kh * kw * oh * ow)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    x_shape = x.shape

    def backward(g):
        gx = _conv_backward_input(g, weight.data, x_shape, stride, padding, dilation) if x.requires_grad else None
        gw = _conv_backward_weight(cols, g) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def transposed_output_size(size: int, k: int, stride: int, pad: int, out_pad: int, dil: int) -> int:
    return (size - 1) * stride - 2 * pad + dil * (k - 1) + out_pad + 1


def transposed_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    output_padding=0,
    dilation=1,
) -> Tensor:
    """Adjoint of ``conv2d`` with the same weight.

    ``weight`` has shape (C_in, C_out, kh, kw): it is the weight of the plain
    convolution mapping the C_out-channel output back to C_in channels.
    """
    stride, padding, output_padding, dilation = map(_pair, (stride, padding, output_padding, dilation))
    if x.ndim != 4:
        raise DimensionError(f"transposed_conv2d expects NCHW input, got rank {x.ndim}", axis="rank")
    if weight.shape[0] != x.shape[1]:
        raise DimensionError(
            f"transposed_conv2d weight expects {weight.shape[0]} input channels, input has {x.shape[1]}", axis="C"
        )
    for op, s, d in zip(output_padding, stride, dilation):
        if op >= max(s, d):
            raise DimensionError(f"output_padding {op} must be smaller than stride {s} or dilation {d}")
    kh, kw = weight.shape[2:]
    n, cin, h, w = x.shape
    cout = weight.shape[1]
    oh = transposed_output_size(h, kh, stride[0], padding[0], output_padding[0], dilation[0])
    ow = transposed_output_size(w, kw, stride[1], padding[1], output_padding[1], dilation[1])
    if oh < 1 or ow < 1:
        raise DimensionError(f"transposed_conv2d output size {oh}x{ow} is empty", axis="H" if oh < 1 else "W")

    out = _conv_backward_input(x.data, weight.data, (n, cout, oh, ow), stride, padding, dilation)
    out = np.ascontiguousarray(out)
    _record("transposed_conv2d", 2 * n * cin * cout * kh * kw * h * w)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad or weight.requires_grad:
            gx_full, cols = _conv_forward(g, weight.data, stride, padding, dilation)
            if x.requires_grad:
                gx = gx_full
            if weight.requires_grad:
                gw = _conv_backward_weight(cols, x.data)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "transposed_conv2d")


@dataclass
class ConvKernel:
    """Weight/bias pair plus the geometry of one convolution."""

    weight: Tensor
    bias: Tensor | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        self.stride, self.padding, self.dilation = map(_pair, (self.stride, self.padding, self.dilation))
        if min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid conv geometry {self.stride=}, {self.padding=}, {self.dilation=}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.weight.shape[2:]
        return (
            conv_output_size(h, kh, self.stride[0], self.padding[0], self.dilation[0]),
            conv_output_size(w, kw, self.stride[1], self.padding[1], self.dilation[1]),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


def sequential_factorized_conv(x: Tensor, vertical: ConvKernel, horizontal: ConvKernel) -> Tensor:
    """Apply the 1xm ``horizontal`` kernel, then the kx1 ``vertical`` kernel.

    For single-channel, zero-bias kernels this equals one k x m convolution
    with the outer product of the two factors.
    """
    if vertical.weight.shape[3] != 1:
        raise DimensionError(f"vertical kernel must be k x 1, got {vertical.weight.shape[2:]}", axis="W")
    if horizontal.weight.shape[2] != 1:
        raise DimensionError(f"horizontal kernel must be 1 x m, got {horizontal.weight.shape[2:]}", axis="H")
    if horizontal.out_channels != vertical.in_channels:
        raise DimensionError(
            f"horizontal kernel emits {horizontal.out_channels} channels, vertical expects {vertical.in_channels}",
            axis="C",
        )
    return vertical(horizontal(x))


# pooling --------------------------------------------------------------------------
def max_pool2d(x: Tensor) -> Tensor:
    """2x2/stride-2 max pooling.

    Odd heights or widths are padded at the bottom/right by replicating the
    last row/column. Ties send the gradient to the first maximum in
    row-major window order.
    """
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    data = x.data
    if ph or pw:
        data = np.pad(data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    h2, w2 = data.shape[2] // 2, data.shape[3] // 2
    win = data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    _record("max_pool2d", out.size)

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        if ph:
            gx[:, :, h - 1, :] += gx[:, :, h, :]
        if pw:
            gx[:, :, :, w - 1] += gx[:, :, :, w]
        return (np.ascontiguousarray(gx[:, :, :h, :w]),)

    return _make(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


# normalization ------------------------------------------------------------------------
@dataclass
class NormState:
    """Affine parameters and (for batch norm) running statistics of one norm layer."""

    kind: str
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    num_batches_tracked: int = 0

    @classmethod
    def create(cls, kind: str, channels: int, dtype=DEFAULT_DTYPE, **kw) -> "NormState":
        if kind not in ("batch", "layer"):
            raise ValueError(f"unknown norm kind {kind!r}")
        gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        state = cls(kind, gamma, beta, **kw)
        if kind == "batch":
            state.running_mean = np.zeros(channels, dtype=dtype)
            state.running_var = np.ones(channels, dtype=dtype)
        return state

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _normalize(x: Tensor, axes, mean, var, eps, gamma: Tensor, beta: Tensor, op: str, track: bool) -> Tensor:
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    gshape = (1, -1, 1, 1)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)
    m = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(gshape)
            if track:
                gx = inv_std / m * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv_std
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, op)


def batch_norm(x: Tensor, state: NormState) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode normalizes with batch statistics and updates the running
    estimates; eval mode is the affine map defined by the running estimates.
    """
    if x.shape[1] != state.channels:
        raise DimensionError(f"batch_norm has {state.channels} channels, input has {x.shape[1]}", axis="C")
    _record("batch_norm", x.size)
    axes = (0, 2, 3)
    if state.training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise DimensionError("train-mode batch_norm needs at least 2 values per channel", axis="N")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        mom = state.momentum
        state.running_mean *= 1 - mom
        state.running_mean += mom * mean.reshape(-1)
        state.running_var *= 1 - mom
        state.running_var += mom * var.reshape(-1) * (m / (m - 1))
        state.num_batches_tracked += 1
        return _normalize(x, axes, mean, var, state.eps, state.gamma, state.beta, "batch_norm", True)
    global _warned_untracked
    # a FLOP-counting trace never looks at the values, so stay quiet there
    if state.num_batches_tracked == 0 and not _warned_untracked and _flop_log is None:
        logger.warning("batch_norm used in eval mode before any train-mode update; using initial statistics")
        _warned_untracked = True
    mean = state.running_mean.reshape(1, -1, 1, 1)
    var = state.running_var.reshape(1, -1, 1, 1)
    return _normalize(x, axes, mean, var, state.eps, state.gamma, state.beta, "batch_norm", False)


def layer_norm(x: Tensor, state: NormState) -> Tensor:
    """Per-sample normalization over (C, H, W) with a per-channel affine."""
    if x.shape[1] != state.channels:
        raise DimensionError(f"layer_norm has {state.channels} channels, input has {x.shape[1]}", axis="C")
    _record("layer_norm", x.size)
    axes = (1, 2, 3)
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    return _normalize(x, axes, mean, var, state.eps, state.gamma, state.beta, "layer_norm", True)


# serialization -----------------------------------------------------------------------
_HEADER = struct.Struct("<4q")


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Four little-endian int64 shape entries followed by the raw values.

    Arrays of rank < 4 are left-padded with ones in the header.
    """
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise DimensionError(f"cannot serialize rank-{arr.ndim} array", axis="rank")
    shape = (1,) * (4 - arr.ndim) + arr.shape
    return _HEADER.pack(*shape) + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def tensor_from_bytes(buf: bytes, dtype, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of ``tensor_to_bytes``; returns (array, bytes consumed)."""
    if len(buf) - offset < _HEADER.size:
        raise ValueError("truncated tensor header")
    shape = _HEADER.unpack_from(buf, offset)
    if any(s < 0 for s in shape):
        raise ValueError(f"bad tensor header {shape}")
    dt = np.dtype(dtype).newbyteorder("<")
    count = int(np.prod(shape))
    nbytes = count * dt.itemsize
    start = offset + _HEADER.size
    if len(buf) - start < nbytes:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=start).astype(np.dtype(dtype)).reshape(shape)
    return arr, _HEADER.size + nbytes
