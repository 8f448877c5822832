import math

import numpy as np
import pytest

from vesseldiff import ndtensor as nd
from vesseldiff.ndtensor import Tensor, backward
from vesseldiff.losses import (Optimizer, TrainingError, VesselWeightConfig,
                               bce_loss, dice_loss, dilate_mask, noise_loss,
                               segmentation_loss, vessel_weighted_noise_loss)


class TestNoiseLoss:
    def test_zero_when_equal(self):
        x = np.random.default_rng(0).standard_normal((2, 3))
        assert noise_loss(x, Tensor(x)).item() == 0.0

    def test_constant_offset(self):
        assert noise_loss(np.zeros((4,)), Tensor(np.full((4,), 2.0))).item() == 4.0

    def test_hand_value(self):
        v = noise_loss(np.array([1.0, 2.0]), Tensor(np.array([0.0, 0.0])))
        assert v.item() == pytest.approx(2.5)

    def test_shape_mismatch(self):
        with pytest.raises(nd.DimensionError):
            noise_loss(np.zeros((2,)), Tensor(np.zeros((3,))))


class TestVesselWeightedLoss:
    def test_empty_mask_falls_back(self):
        rng = np.random.default_rng(1)
        t, p = rng.standard_normal((4, 4)), Tensor(rng.standard_normal((4, 4)))
        mask = np.zeros((4, 4))
        assert vessel_weighted_noise_loss(t, p, mask).item() == \
            pytest.approx(noise_loss(t, p).item())

    def test_lambda_zero(self):
        rng = np.random.default_rng(2)
        t, p = rng.standard_normal((4, 4)), Tensor(rng.standard_normal((4, 4)))
        mask = np.ones((4, 4))
        cfg = VesselWeightConfig(lam=0.0)
        assert vessel_weighted_noise_loss(t, p, mask, cfg).item() == \
            pytest.approx(noise_loss(t, p).item())

    def test_hand_value(self):
        t = np.zeros((2, 2))
        p = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
        mask = np.array([[1.0, 0.0], [0.0, 0.0]])
        cfg = VesselWeightConfig(lam=1.0, dilation_radius=0)
        assert vessel_weighted_noise_loss(t, p, mask, cfg).item() == \
            pytest.approx(1.25)

    def test_nonbinary_mask_rejected(self):
        with pytest.raises(ValueError):
            vessel_weighted_noise_loss(np.zeros((2, 2)), Tensor(np.zeros((2, 2))),
                                       np.full((2, 2), 0.5))

    def test_dominates_noise_loss(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            t = rng.standard_normal((6, 6))
            p = Tensor(rng.standard_normal((6, 6)))
            mask = (rng.random((6, 6)) > 0.6).astype(float)
            lam = float(rng.random() * 3)
            v = vessel_weighted_noise_loss(t, p, mask, VesselWeightConfig(lam=lam))
            assert v.item() >= noise_loss(t, p).item() - 1e-12

    def test_dilation(self):
        mask = np.zeros((5, 5))
        mask[2, 2] = 1.0
        d = dilate_mask(mask, 1)
        assert d.sum() == 9
        assert dilate_mask(mask, 0).sum() == 1


class TestDiceLoss:
    def test_perfect_match_is_zero(self):
        g = np.array([1.0, 0.0, 1.0, 1.0])
        assert dice_loss(Tensor(g.copy()), g).item() == pytest.approx(0.0)

    def test_worst_case_formula(self):
        n = 16
        v = dice_loss(Tensor(np.ones(n)), np.zeros(n), smooth=1.0)
        assert v.item() == pytest.approx(1.0 - 1.0 / (n + 1.0))

    def test_hand_value(self):
        v = dice_loss(Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0]))
        assert v.item() == pytest.approx(1.0 / 3.0)

    def test_range(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            p = Tensor(rng.random((8,)))
            g = (rng.random((8,)) > 0.5).astype(float)
            v = dice_loss(p, g).item()
            assert 0.0 <= v < 1.0


class TestBceLoss:
    def test_perfect_prediction_tiny(self):
        g = np.array([1.0, 0.0, 1.0])
        assert bce_loss(Tensor(g.copy()), g).item() <= 1e-6

    def test_half_everywhere(self):
        v = bce_loss(Tensor(np.full((10,), 0.5)), np.zeros(10))
        assert v.item() == pytest.approx(math.log(2.0), rel=1e-9)

    def test_hand_value(self):
        v = bce_loss(Tensor(np.array([0.9])), np.array([1.0]))
        assert v.item() == pytest.approx(-math.log(0.9), rel=1e-9)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = Tensor(rng.random((8,)))
            g = (rng.random((8,)) > 0.5).astype(float)
            assert bce_loss(p, g).item() >= 0.0


class TestOptimizer:
    def test_zero_gradient_no_change(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Optimizer({"p": p}, kind="adam", learning_rate=0.1)
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_magnitude(self):
        # hand-rolled recurrence: bias-corrected first step is lr * g/|g|
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Optimizer({"p": p}, kind="adam", learning_rate=0.1)
        p.grad = np.array([1.0])
        opt.step()
        m_hat, v_hat = 1.0, 1.0
        expected = -0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert p.data[0] == pytest.approx(expected, rel=1e-9)
        assert p.data[0] == pytest.approx(-0.1, rel=1e-6)

    def test_adamw_decoupled_decay(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Optimizer({"p": p}, kind="adamw", learning_rate=0.1, weight_decay=0.1)
        p.grad = np.array([0.0])
        opt.step()
        assert p.data[0] == pytest.approx(0.99)

    def test_nan_gradient_raises_with_name(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Optimizer({"theta": p}, learning_rate=0.1)
        p.grad = np.array([np.nan])
        with pytest.raises(TrainingError, match="theta"):
            opt.step()

    def test_multi_step_against_reference_recurrence(self):
        rng = np.random.default_rng(6)
        grads = [rng.standard_normal(3) for _ in range(10)]
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = Optimizer({"p": p}, kind="adam", learning_rate=0.01)
        m = np.zeros(3)
        v = np.zeros(3)
        ref = np.zeros(3)
        for i, g in enumerate(grads, start=1):
            p.grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** i)) / (np.sqrt(v / (1 - 0.999 ** i)) + 1e-8)
        assert np.allclose(p.data, ref, atol=1e-12)


def test_segmentation_overfit_single_pair():
    # total loss decreases over 200 steps on one fixed pair
    from vesseldiff.nets import Segmenter
    rng = np.random.default_rng(7)
    img = rng.random((1, 1, 8, 8))
    mask = (rng.random((1, 1, 8, 8)) > 0.7).astype(float)
    net = Segmenter(seed=8)
    opt = Optimizer(net.params, kind="adam", learning_rate=1e-3)
    first = None
    last = None
    for step in range(200):
        logits = net.forward(img)
        loss = segmentation_loss(logits, Tensor(mask))
        if first is None:
            first = loss.item()
        last = loss.item()
        opt.zero_grad()
        backward(loss)
        opt.step()
    assert last < first
