import numpy as np
import pytest

from vesseldiff import ndtensor as nd
from vesseldiff.cli import net_gradient_check
from vesseldiff.ndtensor import Tensor
from vesseldiff.nets import (Denoiser, Segmenter, conditionalize,
                             parameter_count, timestep_embedding)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestTimestepEmbedding:
    def test_deterministic(self):
        assert np.array_equal(timestep_embedding(17), timestep_embedding(17))

    def test_distinct_timesteps(self):
        embs = [timestep_embedding(t) for t in range(1, 201)]
        for i in range(0, 200, 37):
            for j in range(i + 1, 200, 41):
                assert not np.array_equal(embs[i], embs[j])

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            timestep_embedding(3, dim=7)


class TestDenoiser:
    def test_output_shape_matches_input(self):
        net = Denoiser(conditional=False, seed=1)
        for h, w in [(8, 8), (16, 12), (32, 32)]:
            x = rand((2, 1, h, w))
            assert net.predict(x, 3).shape == (2, 1, h, w)

    def test_zero_head_gives_zero_output(self):
        net = Denoiser(conditional=False, seed=2)
        out = net.predict(rand((1, 1, 8, 8), seed=3), 5)
        assert np.all(out == 0.0)

    def test_indivisible_size_rejected(self):
        net = Denoiser(conditional=False, seed=1)
        with pytest.raises(nd.DimensionError):
            net.predict(rand((1, 1, 10, 10)), 1)

    def test_condition_contract(self):
        uncond = Denoiser(conditional=False, seed=1)
        cond = Denoiser(conditional=True, seed=1)
        x = rand((1, 1, 8, 8))
        with pytest.raises(nd.ContractError):
            uncond.predict(x, 1, condition=x)
        with pytest.raises(nd.ContractError):
            cond.predict(x, 1)

    def test_gradient_check(self):
        rng = np.random.default_rng(0)
        net = Denoiser(conditional=True, seed=4)
        for p in net.params.values():
            p.data = p.data + rng.normal(0.0, 0.05, p.data.shape)
        x = rand((1, 1, 8, 8), seed=5)
        cond = (np.random.default_rng(6).random((1, 1, 8, 8)) > 0.7).astype(float)

        def loss(n):
            out = n.forward(x, 7, cond)
            return (out * out).mean()

        assert net_gradient_check(net, loss, rng, coords_per_param=3) < 1e-4

    def test_seed_determinism(self):
        a = Denoiser(conditional=True, seed=9)
        b = Denoiser(conditional=True, seed=9)
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)
        x = rand((1, 1, 8, 8))
        c = np.zeros((1, 1, 8, 8))
        assert np.array_equal(a.predict(x, 3, c), b.predict(x, 3, c))

    def test_timestep_sensitivity_after_training(self):
        # a few steps of training make the head nonzero; then t must matter
        from vesseldiff.losses import Optimizer, noise_loss
        net = Denoiser(conditional=False, seed=10)
        opt = Optimizer(net.params, learning_rate=1e-2)
        rng = np.random.default_rng(11)
        for _ in range(5):
            x = rng.standard_normal((4, 1, 8, 8))
            pred = net.forward(x, int(rng.integers(1, 100)))
            loss = noise_loss(rng.standard_normal(x.shape), pred)
            opt.zero_grad()
            nd.backward(loss)
            opt.step()
        x = rand((1, 1, 8, 8), seed=12)
        diff = np.abs(net.predict(x, 1) - net.predict(x, 99)).mean()
        assert diff > 0.0


class TestSegmenter:
    def test_shape_preservation(self):
        net = Segmenter(seed=1)
        assert net.predict(rand((3, 1, 16, 16))).shape == (3, 1, 16, 16)

    def test_probs_in_unit_interval(self):
        net = Segmenter(seed=2)
        for p in net.params.values():
            p.data = p.data + np.random.default_rng(3).normal(0, 0.1, p.data.shape)
        probs = net.predict_probs(rand((1, 1, 8, 8)))
        assert np.all((probs > 0) & (probs < 1))

    def test_bias_only_network_constant_logit(self):
        net = Segmenter(seed=4)
        for name, p in net.params.items():
            p.data = np.zeros_like(p.data)
        net.params["head.b"].data = np.array([1.3])
        out = net.predict(rand((1, 1, 8, 8), seed=5))
        assert np.allclose(out, 1.3)

    def test_gradient_check(self):
        rng = np.random.default_rng(1)
        net = Segmenter(seed=6)
        for p in net.params.values():
            p.data = p.data + rng.normal(0.0, 0.05, p.data.shape)
        x = rand((1, 1, 8, 8), seed=7)

        def loss(n):
            out = n.forward(x)
            return (out * out).mean()

        assert net_gradient_check(net, loss, rng, coords_per_param=3) < 1e-4


class TestConditionalize:
    def test_bit_exact_equivalence(self):
        net = Denoiser(conditional=False, seed=20)
        rng = np.random.default_rng(21)
        for p in net.params.values():
            p.data = p.data + rng.normal(0, 0.1, p.data.shape)
        cond_net = conditionalize(net)
        x = rand((2, 1, 8, 8), seed=22)
        for c in (np.zeros((2, 1, 8, 8)), np.ones((2, 1, 8, 8))):
            assert np.array_equal(net.predict(x, 5), cond_net.predict(x, 5, c))

    def test_parameter_count_delta(self):
        net = Denoiser(conditional=False, seed=23)
        assert parameter_count(conditionalize(net)) - parameter_count(net) == 3 * 3 * 16

    def test_double_conversion_rejected(self):
        with pytest.raises(nd.ContractError):
            conditionalize(Denoiser(conditional=True, seed=24))

    def test_condition_weights_receive_gradient(self):
        from vesseldiff.losses import Optimizer, noise_loss
        net = conditionalize(Denoiser(conditional=False, seed=25))
        rng = np.random.default_rng(26)
        for name, p in net.params.items():
            if name != "stem.w":
                p.data = p.data + rng.normal(0, 0.05, p.data.shape)
        # target correlates with the condition channel
        cond = (rng.random((4, 1, 8, 8)) > 0.5).astype(float)
        x = rng.standard_normal((4, 1, 8, 8))
        pred = net.forward(x, 3, cond)
        loss = noise_loss(2.0 * cond - 1.0, pred)
        nd.backward(loss)
        grad_cond_slice = net.params["stem.w"].grad[:, 1]
        assert np.abs(grad_cond_slice).max() > 0.0
