"""Central finite-difference checks for every differentiable op and both encoder blocks.

Each case builds random float64 inputs from a seed, reduces the op output
to a scalar with a fixed random weighting, and compares the reverse-mode
gradient of every input against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from . import tensor_core as tc
from .blocks import MultiscaleStage, MultiscaleStageSpec, MultiviewStage, MultiviewStageSpec
from .tensor_core import ConvKernel, NormState, Tensor

OP_TOL = 1e-6
BLOCK_TOL = 1e-5
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seeds: int
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two max-norms."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(fn: Callable[..., Tensor], tensors: list[Tensor], rng: np.random.Generator, h: float = STEP) -> float:
    """Relative error of the full gradient vector (all ``tensors`` concatenated).

    Scaling by the whole vector rather than per tensor keeps gradients that
    are identically zero in exact arithmetic (e.g. a conv weight feeding a
    scale-invariant norm) from turning roundoff into a spurious failure.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = fn(*tensors)
    weights = rng.standard_normal(out.shape)

    def objective() -> float:
        with tc.no_grad():
            return float((fn(*tensors).data * weights).sum())

    loss = (out * Tensor(weights)).sum()
    loss.backward()
    analytic, numeric = [], []
    for t in tensors:
        analytic.append((t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1).copy())
        flat = t.data.reshape(-1)
        est = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = objective()
            flat[i] = orig - h
            down = objective()
            flat[i] = orig
            est[i] = (up - down) / (2 * h)
        numeric.append(est)
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def _away_from_zero(rng, shape, low=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 2.0, size=shape)


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


# each case: rng -> (fn, tensors)
def _conv(rng):
    x = _t(rng.standard_normal((2, 3, 5, 6)))
    w = _t(rng.standard_normal((4, 3, 3, 3)))
    b = _t(rng.standard_normal(4))
    return (lambda x, w, b: tc.conv2d(x, w, b, padding=1)), [x, w, b]


def _conv_strided_dilated(rng):
    x = _t(rng.standard_normal((1, 2, 9, 8)))
    w = _t(rng.standard_normal((3, 2, 3, 1)))
    b = _t(rng.standard_normal(3))
    return (lambda x, w, b: tc.conv2d(x, w, b, stride=(2, 1), padding=(2, 0), dilation=2)), [x, w, b]


def _factorized(rng):
    x = _t(rng.standard_normal((1, 2, 6, 6)))
    wv = _t(rng.standard_normal((2, 2, 5, 1)))
    wh = _t(rng.standard_normal((2, 2, 1, 3)))
    bv, bh = _t(rng.standard_normal(2)), _t(rng.standard_normal(2))

    def fn(x, wv, wh, bv, bh):
        return tc.sequential_factorized_conv(
            x, ConvKernel(wv, bv, padding=(2, 0)), ConvKernel(wh, bh, padding=(0, 1))
        )

    return fn, [x, wv, wh, bv, bh]


def _transposed(rng):
    x = _t(rng.standard_normal((2, 3, 3, 4)))
    w = _t(rng.standard_normal((3, 2, 3, 3)))
    b = _t(rng.standard_normal(2))
    return (lambda x, w, b: tc.transposed_conv2d(x, w, b, stride=2, padding=1, output_padding=1)), [x, w, b]


def _max_pool(rng):
    x = _t(rng.standard_normal((2, 2, 5, 4)))
    return tc.max_pool2d, [x]


def _batch_norm_train(rng):
    x = _t(rng.standard_normal((3, 2, 3, 3)) * 2 + 1)
    state = NormState.create("batch", 2, np.float64)
    state.gamma.data[:] = rng.uniform(0.5, 1.5, 2)
    state.beta.data[:] = rng.standard_normal(2)
    return (lambda x, g, b: tc.batch_norm(x, state)), [x, state.gamma, state.beta]


def _batch_norm_eval(rng):
    x = _t(rng.standard_normal((2, 3, 2, 2)))
    state = NormState.create("batch", 3, np.float64, training=False)
    state.running_mean[:] = rng.standard_normal(3)
    state.running_var[:] = rng.uniform(0.5, 2.0, 3)
    state.num_batches_tracked = 1
    state.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    return (lambda x, g, b: tc.batch_norm(x, state)), [x, state.gamma, state.beta]


def _layer_norm(rng):
    x = _t(rng.standard_normal((2, 3, 3, 2)))
    state = NormState.create("layer", 3, np.float64)
    state.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    state.beta.data[:] = rng.standard_normal(3)
    return (lambda x, g, b: tc.layer_norm(x, state)), [x, state.gamma, state.beta]


def _softmax(axes):
    def case(rng):
        x = _t(rng.standard_normal((2, 3, 3, 4)))
        return (lambda x: tc.softmax_axes(x, axes)), [x]

    return case


def _gated_softmax(rng):
    x = _t(rng.standard_normal((1, 2, 3, 3)))
    return (lambda x: tc.softmax_axes(x, ("C", "W")) * x), [x]


def _unary(op, away=False):
    def case(rng):
        shape = (2, 2, 3, 3)
        x = _t(_away_from_zero(rng, shape) if away else rng.standard_normal(shape) * 2)
        return op, [x]

    return case


def _split_concat(rng):
    x = _t(rng.standard_normal((2, 8, 2, 3)))

    def fn(x):
        a, b, c, d = tc.channel_split(x, 4)
        return tc.channel_concat([d * 2.0, b, c * c, a])

    return fn, [x]


def _arith(rng):
    a = _t(rng.standard_normal((2, 3, 2, 2)))
    b = _t(rng.uniform(0.5, 2.0, (1, 3, 1, 1)))
    return (lambda a, b: (a * b + a / b - b) - tc.log(b * b)), [a, b]


def _reductions(rng):
    x = _t(rng.standard_normal((2, 3, 2, 2)))
    return (lambda x: x.sum(axis=(1, 2, 3)) + x.mean(axis=(2, 3)).sum(axis=1) * 3.0), [x]


def _upsample(rng):
    x = _t(rng.standard_normal((1, 2, 2, 3)))
    return (lambda x: tc.upsample_nearest(x, 4)), [x]


def _clip(rng):
    x = _t(rng.choice([0.1, 0.5, 0.9], size=(1, 1, 3, 3)) + rng.uniform(-0.05, 0.05, (1, 1, 3, 3)))
    return (lambda x: tc.clip(x, 0.2, 0.8) * x), [x]


def _loss(fn):
    def case(rng):
        pred = _t(rng.uniform(0.05, 0.95, (2, 1, 4, 4)))
        target = _t((rng.random((2, 1, 4, 4)) > 0.5).astype(float))
        return (lambda p: fn(p, target)), [pred]

    return case


def _multiscale(rng):
    stage = MultiscaleStage(MultiscaleStageSpec(4, 8, "3x5", 2), rng=rng, dtype=np.float64)
    for state in stage.norm_states():
        state.gamma.data[:] = rng.uniform(0.5, 1.5, state.channels)
        state.beta.data[:] = rng.standard_normal(state.channels)
    x = _t(rng.standard_normal((2, 4, 4, 4)))
    params = stage.parameters()
    return (lambda x, *p: stage(x)), [x, *params]


def _multiview(rng):
    stage = MultiviewStage(MultiviewStageSpec(8, 8), rng=rng, dtype=np.float64)
    stage.norm.state.gamma.data[:] = rng.uniform(0.5, 1.5, 8)
    stage.norm.state.beta.data[:] = rng.standard_normal(8)
    x = _t(rng.standard_normal((1, 8, 4, 4)))
    return (lambda x, *p: stage(x)), [x, *stage.parameters()]


OP_CASES: dict[str, Callable] = {
    "conv2d": _conv,
    "conv2d_strided_dilated": _conv_strided_dilated,
    "sequential_factorized_conv": _factorized,
    "transposed_conv2d": _transposed,
    "max_pool2d": _max_pool,
    "batch_norm_train": _batch_norm_train,
    "batch_norm_eval": _batch_norm_eval,
    "layer_norm": _layer_norm,
    "softmax_hw": _softmax(("H", "W")),
    "softmax_hc": _softmax(("C", "H")),
    "softmax_wc": _softmax(("C", "W")),
    "softmax_gate": _gated_softmax,
    "relu": _unary(tc.relu, away=True),
    "gelu": _unary(tc.gelu),
    "sigmoid": _unary(tc.sigmoid),
    "channel_split_concat": _split_concat,
    "arithmetic": _arith,
    "reductions": _reductions,
    "upsample_nearest": _upsample,
    "clip": _clip,
    "bce_loss": _loss(losses.bce_loss),
    "dice_loss": _loss(losses.dice_loss),
    "combined_loss": _loss(lambda p, t: losses.combined_loss(p, t, losses.LossConfig(alpha=0.3, beta=0.7))),
}

BLOCK_CASES: dict[str, Callable] = {
    "multiscale_block": _multiscale,
    "multiview_block": _multiview,
}


def run_case(name: str, case: Callable, seeds: int, tolerance: float, base_seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, s])
        fn, tensors = case(rng)
        worst = max(worst, check_gradients(fn, tensors, rng))
    return CheckResult(name, worst, seeds, tolerance, time.perf_counter() - start)


def run_suite(
    seeds: int = 20,
    op_tol: float = OP_TOL,
    block_tol: float = BLOCK_TOL,
    base_seed: int = 0,
    only: list[str] | None = None,
) -> list[CheckResult]:
    results = []
    for cases, tol in ((OP_CASES, op_tol), (BLOCK_CASES, block_tol)):
        for name, case in cases.items():
            if only and name not in only:
                continue
            results.append(run_case(name, case, seeds, tol, base_seed))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'tol':>7}  seeds  result"]
    for r in results:
        lines.append(
            f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {r.tolerance:7.0e}  {r.seeds:5d}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
