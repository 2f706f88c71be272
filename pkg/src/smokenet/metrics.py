"""Segmentation quality and efficiency measurements."""

from __future__ import annotations

import json
import os
import platform
import statistics
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor_core as tc
from .tensor_core import DimensionError


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, tc.Tensor) else np.asarray(x)


def iou(pred: np.ndarray, target: np.ndarray) -> float:
    """|P & T| / |P | T| for boolean arrays; 1.0 when both are empty."""
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def miou(pred_masks, target_masks, threshold: float = 0.5, mode: str = "mean") -> float:
    """Per-image IoU averaged over images.

    ``mode="mean"`` averages the smoke and background IoUs; ``mode="smoke"``
    reports the smoke class alone. Inputs are (N, 1, H, W) or (N, H, W).
    """
    pred = _as_array(pred_masks)
    target = _as_array(target_masks)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if mode not in ("mean", "smoke"):
        raise ValueError(f"mode must be 'mean' or 'smoke', got {mode!r}")
    p = (pred >= threshold).reshape(pred.shape[0], -1)
    t = (target >= 0.5).reshape(target.shape[0], -1)
    scores = []
    for pi, ti in zip(p, t):
        smoke = iou(pi, ti)
        scores.append(smoke if mode == "smoke" else 0.5 * (smoke + iou(~pi, ~ti)))
    return float(np.mean(scores))


@dataclass
class FlopReport:
    total: int
    by_layer: dict[str, int]
    by_op: dict[str, int]
    input_shape: tuple[int, ...]


def estimate_flops(model, input_shape, include_aux: bool = False) -> FlopReport:
    """Analytic FLOP count for one eval-mode forward at ``input_shape``.

    Auxiliary heads only feed the training loss, so like ``count_params``
    they are left out unless ``include_aux`` is set.

    Convolutions: 2 * C_in * C_out * kh * kw per output pixel (per input
    pixel for transposed convs, where each input value is scattered once
    through the kernel). Other ops use ``tensor_core.ELEMENTWISE_COST`` per
    element touched. Bias additions are not counted.
    """
    was_training = getattr(model, "training", False)
    model.eval()
    dtype = getattr(model, "dtype", np.float32)
    x = tc.Tensor(np.zeros(tuple(input_shape), dtype=dtype))
    try:
        with tc.no_grad(), tc.record_flops() as log:
            model(x)
    finally:
        model.train(was_training)
    by_layer: dict[str, int] = defaultdict(int)
    by_op: dict[str, int] = defaultdict(int)
    total = 0
    for scope, op, count in log:
        if not include_aux and (scope == "aux" or scope.startswith("aux.")):
            continue
        flops = count if op in ("conv2d", "transposed_conv2d") else count * tc.ELEMENTWISE_COST.get(op, 0)
        by_layer[scope or "<root>"] += flops
        by_op[op] += flops
        total += flops
    return FlopReport(total, dict(by_layer), dict(by_op), tuple(input_shape))


def environment() -> dict:
    return {
        "cpu": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }


def benchmark_fps(model, input_shape, warmup: int = 2, iters: int = 10, threads: int = 1) -> dict:
    """Median wall-clock forwards per second in eval mode, BLAS pinned to ``threads``."""
    if iters < 3:
        raise ValueError("benchmark_fps needs iters >= 3")
    model.eval()
    x = tc.Tensor(np.random.default_rng(0).random(tuple(input_shape)).astype(model.dtype))
    times = []
    with threadpool_limits(limits=threads), tc.no_grad():
        for _ in range(warmup):
            model(x)
        for _ in range(iters):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    median = statistics.median(times)
    return {
        "fps": input_shape[0] / median,
        "median_seconds": median,
        "iters": iters,
        "warmup": warmup,
        "threads": threads,
        "precision": 64 if model.dtype == np.float64 else 32,
        "environment": environment(),
    }


@dataclass
class MetricsReport:
    miou: float | None
    params: int
    flops: int
    fps: float | None
    input_shape: tuple[int, ...]
    precision: int
    environment: dict = field(default_factory=environment)
    flops_by_layer: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.miou is not None and not 0.0 <= self.miou <= 1.0:
            raise ValueError(f"miou {self.miou} outside [0, 1]")

    def to_json(self) -> str:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return json.dumps(d, indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("mIoU", "n/a" if self.miou is None else f"{100 * self.miou:.2f} %"),
            ("#Params", f"{self.params} ({self.params / 1e3:.2f} K)"),
            ("FLOPs", f"{self.flops} ({self.flops / 1e6:.2f} M)"),
            ("FPS", "n/a" if self.fps is None else f"{self.fps:.2f}"),
            ("input", "x".join(map(str, self.input_shape))),
            ("precision", f"{self.precision}-bit"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
