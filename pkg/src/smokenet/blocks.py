"""Encoder and decoder building blocks.

The two encoder stage types both split their input into four channel chunks
and route each chunk through a different operator before fusing:

* ``MultiscaleStage``: identity, 1x1 conv, a factorized conv from ``CONVS``
  and a dilated copy of it; each branch gets ReLU and its own batch norm.
* ``MultiviewStage``: identity plus three softmax gates computed over
  (H, W), (C, H) and (C, W) respectively.

``PlainConvStage`` and ``SpatialAttentionStage`` are the single-path
baselines used for ablation profiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .layers import BatchNorm2d, Conv2d, LayerNorm2d, Module, ModuleList, TransposedConv2d
from .tensor_core import ConvKernel, DimensionError, Tensor

CONVS = ("1x3", "3x1", "1x5", "5x1", "3x3", "3x5", "5x3", "5x5")

# softmax axis sets for chunks 2..4; chunk 1 passes through unchanged
VIEW_AXES = (("H", "W"), ("C", "H"), ("C", "W"))


def parse_kernel(name: str) -> tuple[int, int]:
    if name not in CONVS:
        raise ValueError(f"kernel {name!r} is not one of {', '.join(CONVS)}")
    kh, kw = name.split("x")
    return int(kh), int(kw)


@dataclass(frozen=True)
class MultiscaleStageSpec:
    in_channels: int
    out_channels: int
    selected_kernel: str = "3x3"
    dilation_rate: int = 2

    def __post_init__(self):
        if self.in_channels % 4:
            raise ValueError(f"multiscale in_channels must be divisible by 4, got {self.in_channels}")
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")
        if self.dilation_rate < 1:
            raise ValueError("dilation_rate must be positive")
        parse_kernel(self.selected_kernel)


@dataclass(frozen=True)
class MultiviewStageSpec:
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.in_channels % 4:
            raise ValueError(f"multiview in_channels must be divisible by 4, got {self.in_channels}")
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")


def _check_channels(x: Tensor, expected: int, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects an NCHW tensor, got rank {x.ndim}", axis="rank")
    if x.shape[1] != expected:
        raise DimensionError(f"{what} expects {expected} channels, got {x.shape[1]}", axis="C")


class FactorizedConv(Module):
    """A k x m conv realised as 1 x m followed by k x 1, both "same"-padded.

    Kernels with a unit side (1x3, 5x1, ...) are a single 1-D conv.
    """

    def __init__(self, channels: int, kernel: str, dilation: int, *, rng, dtype):
        kh, kw = parse_kernel(kernel)
        d = dilation
        self.horizontal = (
            Conv2d(channels, channels, (1, kw), padding=(0, d * (kw - 1) // 2), dilation=(1, d), rng=rng, dtype=dtype)
            if kw > 1
            else None
        )
        self.vertical = (
            Conv2d(channels, channels, (kh, 1), padding=(d * (kh - 1) // 2, 0), dilation=(d, 1), rng=rng, dtype=dtype)
            if kh > 1
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        if self.horizontal is not None and self.vertical is not None:
            return tc.sequential_factorized_conv(x, self.vertical.kernel, self.horizontal.kernel)
        conv = self.horizontal if self.horizontal is not None else self.vertical
        return conv(x)


class MultiscaleStage(Module):
    def __init__(self, spec: MultiscaleStageSpec, *, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        c = spec.in_channels // 4
        self.pointwise = Conv2d(c, c, 1, rng=rng, dtype=dtype)
        self.selected = FactorizedConv(c, spec.selected_kernel, 1, rng=rng, dtype=dtype)
        self.dilated = FactorizedConv(c, spec.selected_kernel, spec.dilation_rate, rng=rng, dtype=dtype)
        self.norms = ModuleList([BatchNorm2d(c, dtype=dtype) for _ in range(4)])
        # 1x1 projection only when the width changes, identity otherwise
        self.proj = (
            Conv2d(spec.in_channels, spec.out_channels, 1, rng=rng, dtype=dtype)
            if spec.in_channels != spec.out_channels
            else None
        )

    def branches(self, x: Tensor) -> list[Tensor]:
        """The four normalized chunk outputs, before concatenation."""
        _check_channels(x, self.spec.in_channels, "multiscale stage")
        f1, f2, f3, f4 = tc.channel_split(x, 4)
        paths = [
            tc.relu(f1),
            tc.relu(self.pointwise(f2)),
            tc.relu(self.selected(f3)),
            tc.relu(self.dilated(f4)),
        ]
        return [norm(p) for norm, p in zip(self.norms, paths)]

    def forward(self, x: Tensor) -> Tensor:
        fused = tc.channel_concat(self.branches(x))
        if self.proj is not None:
            fused = self.proj(fused)
        return tc.max_pool2d(tc.relu(fused))


class MultiviewStage(Module):
    def __init__(self, spec: MultiviewStageSpec, *, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.pointwise = Conv2d(spec.in_channels, spec.out_channels, 1, rng=rng, dtype=dtype)
        self.norm = LayerNorm2d(spec.out_channels, dtype=dtype)

    def views(self, x: Tensor) -> list[Tensor]:
        _check_channels(x, self.spec.in_channels, "multiview stage")
        first, *rest = tc.channel_split(x, 4)
        return [first] + [tc.softmax_axes(chunk, axes) * chunk for chunk, axes in zip(rest, VIEW_AXES)]

    def forward(self, x: Tensor) -> Tensor:
        y = self.pointwise(tc.channel_concat(self.views(x)))
        return tc.max_pool2d(tc.gelu(self.norm(y)))


class PlainConvStage(Module):
    """Ablation baseline: 3x3 conv, batch norm, ReLU, 2x2 max-pool."""

    def __init__(self, in_channels: int, out_channels: int, *, rng, dtype=np.float32):
        self.in_channels = in_channels
        self.conv = Conv2d(in_channels, out_channels, 3, padding=1, rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.in_channels, "plain conv stage")
        return tc.max_pool2d(tc.relu(self.norm(self.conv(x))))


class SpatialAttentionStage(Module):
    """Ablation baseline: one spatial softmax gate over the whole tensor."""

    def __init__(self, in_channels: int, out_channels: int, *, rng, dtype=np.float32):
        self.in_channels = in_channels
        self.pointwise = Conv2d(in_channels, out_channels, 1, rng=rng, dtype=dtype)
        self.norm = LayerNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.in_channels, "spatial attention stage")
        y = self.pointwise(tc.softmax_axes(x, ("H", "W")) * x)
        return tc.max_pool2d(tc.gelu(self.norm(y)))


def _check_half(big: Tensor, small: Tensor, what: str) -> None:
    if big.shape[0] != small.shape[0]:
        raise DimensionError(f"{what}: batch sizes differ ({big.shape[0]} vs {small.shape[0]})", axis="N")
    for ax, name in ((2, "H"), (3, "W")):
        if big.shape[ax] != 2 * small.shape[ax]:
            raise DimensionError(
                f"{what}: lower input {name}={small.shape[ax]} is not half of {big.shape[ax]}", axis=name
            )


class SkipPathway(Module):
    """skip_k = encoder_k + Up(skip_{k+1}); the deepest pathway passes encoder_k through."""

    def __init__(self, channels: int, lower_channels: int | None, *, rng, dtype=np.float32):
        self.up = (
            TransposedConv2d(lower_channels, channels, 3, rng=rng, dtype=dtype) if lower_channels is not None else None
        )

    def forward(self, encoder_out: Tensor, lower_skip: Tensor | None = None) -> Tensor:
        if lower_skip is None or self.up is None:
            return encoder_out
        _check_half(encoder_out, lower_skip, "skip pathway")
        return encoder_out + self.up(lower_skip)


class DecoderStage(Module):
    """Adds the lower decoder output to the skip tensor, then a stride-2 3x3
    transposed conv halves the width (C_k -> C'_k) and doubles H and W.

    The lower decoder output already sits at this stage's resolution because
    the previous stage's transposed conv performed the upsampling.
    """

    def __init__(self, in_channels: int, out_channels: int, *, rng, dtype=np.float32):
        self.in_channels = in_channels
        self.up = TransposedConv2d(in_channels, out_channels, 3, rng=rng, dtype=dtype)

    def forward(self, skip: Tensor | None, lower: Tensor | None = None) -> Tensor:
        if skip is None and lower is None:
            raise ValueError("decoder stage needs a skip tensor or a lower decoder output")
        if skip is None:
            x = lower
        elif lower is None:
            x = skip
        else:
            if skip.shape != lower.shape:
                raise DimensionError(f"decoder inputs disagree: skip {skip.shape} vs lower {lower.shape}", axis="C")
            x = skip + lower
        _check_channels(x, self.in_channels, "decoder stage")
        return self.up(x)


class SegmentationHead(Module):
    """Stride-1 3x3 transposed conv to one channel, then sigmoid."""

    def __init__(self, in_channels: int, *, rng, dtype=np.float32):
        self.conv = TransposedConv2d(in_channels, 1, 3, rng=rng, dtype=dtype, stride=1, padding=1, output_padding=0)

    def forward(self, x: Tensor) -> Tensor:
        return tc.sigmoid(self.conv(x))


class AuxHead(Module):
    """Deep-supervision tap: 1x1 conv to one channel, sigmoid, nearest upsample."""

    def __init__(self, in_channels: int, scale: int, *, rng, dtype=np.float32):
        self.conv = Conv2d(in_channels, 1, 1, rng=rng, dtype=dtype)
        self.scale = scale

    def forward(self, x: Tensor) -> Tensor:
        return tc.upsample_nearest(tc.sigmoid(self.conv(x)), self.scale)


__all__ = [
    "AuxHead",
    "CONVS",
    "ConvKernel",
    "DecoderStage",
    "FactorizedConv",
    "MultiscaleStage",
    "MultiscaleStageSpec",
    "MultiviewStage",
    "MultiviewStageSpec",
    "PlainConvStage",
    "SegmentationHead",
    "SkipPathway",
    "SpatialAttentionStage",
    "VIEW_AXES",
    "parse_kernel",
]
