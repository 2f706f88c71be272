"""Parameter containers wrapping the functional ops in ``tensor_core``."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor_core as tc
from .tensor_core import ConvKernel, NormState, Tensor


class Parameter(Tensor):
    """A learnable tensor. Optimizer moments live in the optimizer, keyed by name."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    training: bool = True

    def __setattr__(self, key, value):
        if isinstance(value, Module):
            object.__setattr__(value, "_scope_name", key)
        object.__setattr__(self, key, value)

    def __call__(self, *args, **kwargs):
        with tc.name_scope(getattr(self, "_path", None) or getattr(self, "_scope_name", "")):
            return self.forward(*args, **kwargs)

    def assign_paths(self, prefix: str = "") -> None:
        """Record each submodule's dotted attribute path, used to label FLOP records."""
        for key, value in self._children():
            if isinstance(value, Module):
                path = prefix + key
                object.__setattr__(value, "_path", path)
                value.assign_paths(path + ".")

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, NormState):
                yield prefix + key + ".gamma", value.gamma
                yield prefix + key + ".beta", value.beta

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + key + ".")
            elif isinstance(value, NormState) and value.kind == "batch":
                yield prefix + key + ".running_mean", value.running_mean
                yield prefix + key + ".running_var", value.running_var

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def norm_states(self) -> Iterator[NormState]:
        for m in self.modules():
            for _, value in m._children():
                if isinstance(value, NormState):
                    yield value

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        for state in self.norm_states():
            state.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, items):
        for i, m in enumerate(items):
            setattr(self, str(i), m)
        object.__setattr__(self, "_len", len(items))

    def __len__(self):
        return self._len

    def __getitem__(self, i):
        if i < 0:
            i += self._len
        if not 0 <= i < self._len:
            raise IndexError(i)
        return getattr(self, str(i))

    def __iter__(self):
        return (self[i] for i in range(self._len))


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
        padding=0,
        dilation=1,
        stride=1,
        bias: bool = True,
    ):
        kh, kw = tc._pair(kernel_size)
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        self._geometry = (tc._pair(stride), tc._pair(padding), tc._pair(dilation))

    @property
    def kernel(self) -> ConvKernel:
        stride, padding, dilation = self._geometry
        return ConvKernel(self.weight, self.bias, stride, padding, dilation)

    def forward(self, x: Tensor) -> Tensor:
        return self.kernel(x)


class TransposedConv2d(Module):
    """Weight layout (C_in, C_out, kh, kw); see ``tensor_core.transposed_conv2d``."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size=3,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
        stride=2,
        padding=1,
        output_padding=1,
    ):
        kh, kw = tc._pair(kernel_size)
        self.weight = Parameter(kaiming_uniform(rng, (in_channels, out_channels, kh, kw), in_channels * kh * kw, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))
        self._geometry = (stride, padding, output_padding)

    def forward(self, x: Tensor) -> Tensor:
        stride, padding, output_padding = self._geometry
        return tc.transposed_conv2d(x, self.weight, self.bias, stride, padding, output_padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, *, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        self.state = NormState.create("batch", channels, dtype, eps=eps, momentum=momentum)

    def forward(self, x: Tensor) -> Tensor:
        return tc.batch_norm(x, self.state)


class LayerNorm2d(Module):
    def __init__(self, channels: int, *, dtype=np.float32, eps: float = 1e-5):
        self.state = NormState.create("layer", channels, dtype, eps=eps)

    def forward(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.state)
