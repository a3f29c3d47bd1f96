import math

import numpy as np
import pytest

from scripts import tensor_core as tc
from scripts.errors import (
    DegenerateMap,
    DegeneratePrediction,
    HeadDivisibility,
    InputTooSmall,
    LabelOutOfRange,
    NonScalarLoss,
    ShapeMismatch,
)
from scripts.tensor_core import Tensor, backward, gradcheck

TOL = 1e-6
SEEDS = range(10)


def _param(rng, *shape, name=None):
    return Tensor(rng.normal(scale=0.5, size=shape), requires_grad=True, name=name)


def _away_from_zero(rng, *shape):
    return Tensor(rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape), requires_grad=True)


def _projected(out, rng):
    """Scalar sum(out * R) for a fixed random R, so every output element matters."""
    r = Tensor(rng.normal(size=out.shape))
    return tc.sum(tc.mul(out, r))


def _check(build, tensors, seed, h=1e-4):
    rng_seed = 1000 + seed
    return gradcheck(lambda: _projected(build(), np.random.default_rng(rng_seed)), tensors, h=h)


class TestBackward:

    def test_shared_input_sums_gradients(self):
        x = Tensor([3.0], requires_grad=True)
        backward(tc.sum(x * x + x))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_grad_overwritten_between_passes(self):
        x = Tensor([2.0, 5.0], requires_grad=True)
        backward(tc.sum(x))
        backward(tc.sum(x * 3.0))
        np.testing.assert_allclose(x.grad, [3.0, 3.0])

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(NonScalarLoss):
            backward(x * 2.0)

    def test_constants_get_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([4.0, 5.0])
        leaves = backward(tc.sum(x * c))
        assert leaves == [x]
        assert c.grad is None

    def test_unused_leaf_gets_zeros(self):
        x = Tensor([1.0], requires_grad=True)
        y = Tensor([1.0, 2.0], requires_grad=True)
        out = tc.add(tc.sum(x), tc.scale(tc.sum(y), 0.0))
        backward(out)
        np.testing.assert_array_equal(y.grad, [0.0, 0.0])

    def test_long_chain_is_iterative(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 1.0
        backward(tc.sum(y))
        np.testing.assert_array_equal(x.grad, [1.0])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestGradients:

    @pytest.mark.parametrize("seed", SEEDS)
    def test_linear_gelu(self, seed):
        rng = np.random.default_rng(seed)
        x, W, b = _param(rng, 4, 3), _param(rng, 3, 5), _param(rng, 5)
        assert _check(lambda: tc.gelu(tc.linear(x, W, b)), [x, W, b], seed) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu(self, seed):
        rng = np.random.default_rng(seed)
        x = _away_from_zero(rng, 3, 4)
        assert _check(lambda: tc.relu(x), [x], seed) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = _param(rng, 3, 6), _param(rng, 6), _param(rng, 6)
        assert _check(lambda: tc.layer_norm(x, g, b), [x, g, b], seed) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax(self, seed):
        rng = np.random.default_rng(seed)
        x = _param(rng, 2, 3, 4)
        assert _check(lambda: tc.softmax(x), [x], seed) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mhsa(self, seed):
        rng = np.random.default_rng(seed)
        x = _param(rng, 5, 4)
        p = {k: _param(rng, 4, 4) for k in ("wq", "wk", "wv", "wo")}
        p.update({k: _param(rng, 4) for k in ("bq", "bk", "bv", "bo")})
        assert _check(lambda: tc.mhsa(x, p, 2), [x, *p.values()], seed) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv_and_pools(self, seed):
        rng = np.random.default_rng(seed)
        x, W, b = _param(rng, 2, 7, 6), _param(rng, 2, 3), _param(rng, 3)

        def build():
            y = tc.avg_pool2d(tc.conv1x1(x, W, b), 3, 2)
            return tc.adaptive_avg_pool(y, 2, 2)

        assert _check(build, [x, W, b], seed) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_structural_ops(self, seed):
        rng = np.random.default_rng(seed)
        a, c = _param(rng, 2, 3), _param(rng, 2, 2)

        mix = Tensor(np.random.default_rng(seed + 50).normal(size=(5, 3)))

        def build():
            joined = tc.concat([a, c], axis=1)
            flipped = tc.transpose(tc.reshape(joined, (5, 2)), (1, 0))
            return tc.add(tc.mul(flipped, joined), tc.mean(joined)) @ mix

        assert _check(build, [a, c], seed) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_cc_loss(self, seed):
        rng = np.random.default_rng(seed)
        pred = _param(rng, 12)
        gt = rng.uniform(size=12)
        assert gradcheck(lambda: tc.cc_loss(pred, gt), [pred]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_weighted_ce(self, seed):
        rng = np.random.default_rng(seed)
        logits = _param(rng, 6, 3)
        labels = rng.integers(0, 3, size=6)
        w = rng.uniform(0.5, 2.0, size=3)
        assert gradcheck(lambda: tc.weighted_ce_loss(logits, labels, w), [logits]) < TOL


class TestLayers:

    def test_avg_pool_ramp(self):
        x = Tensor(np.arange(25.0).reshape(1, 5, 5))
        np.testing.assert_allclose(tc.avg_pool2d(x, 3, 2).data[0], [[6.0, 8.0], [16.0, 18.0]])

    def test_avg_pool_too_small(self):
        with pytest.raises(InputTooSmall):
            tc.avg_pool2d(Tensor(np.ones((1, 2, 5))))

    def test_adaptive_pool_windows(self):
        x = Tensor(np.arange(16.0).reshape(1, 4, 4))
        np.testing.assert_allclose(tc.adaptive_avg_pool(x, 2, 2).data[0], [[2.5, 4.5], [10.5, 12.5]])
        assert tc.adaptive_avg_pool(Tensor(np.ones((1, 3, 3))), 5, 5).shape == (1, 5, 5)

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(0).normal(scale=50.0, size=(4, 7)))
        y = tc.softmax(x).data
        np.testing.assert_allclose(y.sum(axis=-1), np.ones(4))
        assert np.all(y >= 0)

    def test_layer_norm_moments(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 8)))
        y = tc.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)

    def test_uniform_attention_averages_tokens(self):
        x = Tensor(np.random.default_rng(2).normal(size=(5, 4)))
        p = {k: Tensor(np.zeros((4, 4))) for k in ("wq", "wk")}
        p.update(wv=Tensor(np.eye(4)), wo=Tensor(np.eye(4)))
        p.update({k: Tensor(np.zeros(4)) for k in ("bq", "bk", "bv", "bo")})
        out = tc.mhsa(x, p, 2).data
        np.testing.assert_allclose(out, np.tile(x.data.mean(axis=0), (5, 1)), atol=1e-12)

    def test_head_divisibility(self):
        x = Tensor(np.ones((3, 6)))
        with pytest.raises(HeadDivisibility):
            tc.mhsa(x, {}, 4)

    def test_gelu_values(self):
        y = tc.gelu(Tensor([0.0, 1.0, -1.0])).data
        np.testing.assert_allclose(y, [0.0, 0.8413447460685429, -0.15865525393145707], atol=1e-12)


class TestLosses:

    def test_confident_correct_prediction(self):
        loss = tc.weighted_ce_loss(Tensor([[10.0, 0.0, 0.0]]), [0], [1.0, 1.0, 1.0])
        assert loss.item() == pytest.approx(math.log(1.0 + 2.0 * math.exp(-10.0)))
        assert loss.item() == pytest.approx(9.08e-5, rel=1e-3)

    def test_single_label_ignores_weights(self):
        logits = Tensor([[2.0, 0.0], [0.0, 2.0]])
        plain = tc.weighted_ce_loss(logits, [0, 0], [1.0, 1.0]).item()
        heavy = tc.weighted_ce_loss(logits, [0, 0], [3.0, 1.0]).item()
        assert heavy == pytest.approx(plain)

    def test_weighted_mean_of_row_losses(self):
        logits = Tensor([[2.0, 0.0], [2.0, 0.0]])
        l0 = math.log(1.0 + math.exp(-2.0))
        l1 = math.log(1.0 + math.exp(2.0))
        loss = tc.weighted_ce_loss(logits, [0, 1], [3.0, 1.0]).item()
        assert loss == pytest.approx((3.0 * l0 + l1) / 4.0)

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            tc.weighted_ce_loss(Tensor(np.zeros((2, 3))), [0, 3], [1.0, 1.0, 1.0])

    def test_cc_loss_perfect_and_constant(self):
        gt = np.array([0.0, 1.0, 2.0, 3.0])
        assert tc.cc_loss(Tensor(2.0 * gt + 1.0), gt).item() == pytest.approx(0.0, abs=1e-12)
        pred = Tensor(np.ones(4), requires_grad=True)
        loss = tc.cc_loss(pred, gt)
        backward(loss)
        assert loss.item() == 1.0
        np.testing.assert_array_equal(pred.grad, np.zeros(4))

    def test_cc_loss_constant_target(self):
        with pytest.raises(DegenerateMap):
            tc.cc_loss(Tensor(np.arange(4.0)), np.ones(4))

    def test_cc_loss_constant_prediction_strict(self):
        with pytest.raises(DegeneratePrediction):
            tc.cc_loss(Tensor(np.full(4, 0.5)), np.arange(4.0), strict=True)
