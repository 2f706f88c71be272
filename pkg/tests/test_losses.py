import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bce_sum, dice_per_sample
from smokenet.losses import LossConfig, bce_loss, combined_loss, dice_loss, final_only_loss, layer_wise_loss
from smokenet.model import ModelOutput
from smokenet.tensor_core import DimensionError, Tensor


def _pair(seed, shape=(2, 1, 8, 8)):
    r = np.random.default_rng(seed)
    return r.uniform(0.01, 0.99, shape), (r.random(shape) > 0.5).astype(float)


# BCE ---------------------------------------------------------------------------------
def test_bce_perfect_prediction_hits_clip_floor():
    y = np.array([[0.0, 1.0, 1.0, 0.0]])
    loss = bce_loss(y, y).item()
    assert loss == pytest.approx(-math.log(1 - 1e-7), rel=1e-9)


def test_bce_half_is_ln2():
    y = (np.random.default_rng(0).random((3, 1, 4, 4)) > 0.5).astype(float)
    assert abs(bce_loss(np.full_like(y, 0.5), y).item() - math.log(2)) < 1e-12


def test_bce_matches_oracle():
    p, y = _pair(1)
    p[0, 0, 0, :2] = [0.0, 1.0]  # exercise the clamp
    assert bce_loss(p, y).item() == pytest.approx(bce_sum(p, y), rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        bce_loss(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


# Dice --------------------------------------------------------------------------------
def test_dice_perfect_and_disjoint():
    y = np.zeros((1, 1, 8, 8))
    y[..., :4, :] = 1.0
    assert dice_loss(y, y).item() < 1e-6 * 64
    assert dice_loss(y, y).item() == pytest.approx(1 - 65 / 65)
    # disjoint: 1 - 1 / (32 + 32 + 1)
    assert dice_loss(1 - y, y).item() == pytest.approx(1 - 1 / 65, rel=1e-15)


def test_dice_empty_target_empty_prediction():
    z = np.zeros((1, 1, 4, 4))
    assert dice_loss(z, z).item() == 0.0


def test_dice_matches_per_sample_oracle():
    p, y = _pair(2, (3, 1, 6, 6))
    assert dice_loss(p, y).item() == pytest.approx(dice_per_sample(p, y), rel=1e-12)
    assert dice_loss(p, y, smoothing=0.25).item() == pytest.approx(dice_per_sample(p, y, 0.25), rel=1e-12)


def test_dice_is_per_sample_mean_not_pooled():
    p, y = _pair(3, (2, 1, 4, 4))
    pooled = 1 - (2 * (p * y).sum() + 1) / (p.sum() + y.sum() + 1)
    assert dice_loss(p, y).item() != pytest.approx(pooled, rel=1e-9)


# combined ----------------------------------------------------------------------------
def test_combined_reduces_to_components():
    p, y = _pair(4)
    bce, dice = bce_loss(p, y).item(), dice_loss(p, y).item()
    assert combined_loss(p, y, LossConfig(alpha=1, beta=0)).item() == bce
    assert combined_loss(p, y, LossConfig(alpha=0, beta=1)).item() == dice
    assert combined_loss(p, y).item() == pytest.approx(0.5 * bce + 0.5 * dice, rel=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.floats(0.1, 2.0))
def test_combined_is_linear_in_weights(a, b, scale):
    if a == 0 and b == 0:
        return
    p, y = _pair(5)
    base = combined_loss(p, y, LossConfig(alpha=a, beta=b)).item()
    scaled = combined_loss(p, y, LossConfig(alpha=scale * a, beta=scale * b)).item()
    assert scaled == pytest.approx(scale * base, rel=1e-12, abs=1e-15)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=0, beta=0)
    with pytest.raises(ValueError):
        LossConfig(gamma=(0.5, -0.1, 0, 0, 0))
    with pytest.raises(ValueError):
        LossConfig(dice_smoothing=0)


# layer-wise --------------------------------------------------------------------------
def _output(mask, aux_arrays):
    return ModelOutput(Tensor(mask), [(s, Tensor(a)) for s, a in zip(range(2, 7), aux_arrays)])


def test_layer_wise_with_zero_gamma_is_final_loss():
    p, y = _pair(6)
    out = _output(p, [_pair(s)[0] for s in range(10, 15)])
    cfg = LossConfig(gamma=(0, 0, 0, 0, 0))
    assert layer_wise_loss(out, y, cfg).item() == combined_loss(p, y).item()
    assert final_only_loss(out, y).item() == combined_loss(p, y).item()


def test_layer_wise_identical_masks_scale_by_weight_sum():
    p, y = _pair(7)
    base = combined_loss(p, y).item()
    total = layer_wise_loss(_output(p, [p] * 5), y).item()
    assert abs(total - 2.5 * base) < 1e-12


def test_layer_wise_matches_manual_sum():
    p, y = _pair(8)
    aux = [_pair(s)[0] for s in range(20, 25)]
    gamma = (0.5, 0.4, 0.3, 0.2, 0.1)
    expected = combined_loss(p, y).item() + sum(g * combined_loss(a, y).item() for g, a in zip(gamma, aux))
    assert layer_wise_loss(_output(p, aux), y).item() == pytest.approx(expected, rel=1e-14)


def test_layer_wise_final_weight():
    p, y = _pair(9)
    cfg = LossConfig(gamma=(0,) * 5, final_weight=2.0)
    assert layer_wise_loss(_output(p, []), y, cfg).item() == pytest.approx(2 * combined_loss(p, y).item(), rel=1e-15)


def test_layer_wise_missing_aux_mask():
    p, y = _pair(10)
    with pytest.raises(ValueError, match="stage 2"):
        layer_wise_loss(ModelOutput(Tensor(p), []), y)


def test_layer_wise_independent_of_aux_order():
    p, y = _pair(11)
    aux = [(s, Tensor(_pair(30 + s)[0])) for s in range(2, 7)]
    a = layer_wise_loss(ModelOutput(Tensor(p), aux), y).item()
    b = layer_wise_loss(ModelOutput(Tensor(p), aux[::-1]), y).item()
    assert a == b


def test_loss_gradient_flows_to_prediction():
    p, y = _pair(12)
    t = Tensor(p, requires_grad=True)
    combined_loss(t, y).backward()
    assert t.grad.shape == p.shape and np.isfinite(t.grad).all()
    # BCE pushes predictions toward the target
    assert np.all(np.sign(t.grad[y == 1]) <= 0)
