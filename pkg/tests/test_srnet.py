import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from cmsr.imaging import PyramidSpec
from cmsr.nets import SrDiscriminator, SrGenerator, TranslationGenerator, weights_fingerprint
from cmsr.srnet import (
    LOG_EPS,
    SrConfig,
    SrLossWeights,
    l2_loss,
    sr_adversarial_loss,
    sr_discriminator_loss,
    sr_total_loss,
    super_resolve,
    train_sr,
)
from cmsr.synthnet import PairedDataset, build_synthetic_dataset
from cmsr.training import FingerprintMismatch, TrainingDivergence
from oracles import central_difference, finite_difference_check, max_relative_error

TOY = dict(gen_width=8, gen_blocks=1, disc_width=8, disc_down=3, minibatch=32)


class TestL2:
    def test_equal_images(self, rng):
        a = torch.tensor(rng.uniform(-1, 1, (3, 1, 16, 16)))
        assert float(l2_loss(a, a.clone())) == 0.0

    def test_unnormalized_norm(self):
        assert float(l2_loss(torch.zeros(1, 2), torch.ones(1, 2))) == 2.0

    def test_random_batch_oracle(self, rng):
        a, b = rng.uniform(-1, 1, (2, 5, 1, 6, 6))
        expected = math.fsum(math.fsum((u - v) ** 2 for u, v in zip(a[k].ravel(), b[k].ravel())) for k in range(5)) / 5
        got = float(l2_loss(torch.tensor(a), torch.tensor(b)))
        assert abs(got - expected) / expected < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l2_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))

    def test_gradient(self, rng):
        a0, b0 = rng.uniform(-1, 1, (2, 2, 1, 4, 4))
        a = torch.tensor(a0, requires_grad=True)
        l2_loss(a, torch.tensor(b0)).backward()
        numeric = central_difference(lambda v: float(l2_loss(torch.tensor(v), torch.tensor(b0))), a0, 1e-4)
        assert max_relative_error(a.grad.numpy(), numeric) < 1e-3


class TestAdversarial:
    def test_half(self):
        assert sr_adversarial_loss([0.5]) == pytest.approx(0.6931, abs=1e-4)
        assert sr_adversarial_loss([0.5]) == -math.log(0.5)

    def test_quarter_and_three_quarters(self):
        expected = (-math.log(0.25) - math.log(0.75)) / 2
        assert abs(sr_adversarial_loss([0.25, 0.75]) - expected) < 1e-12
        assert sr_adversarial_loss([0.25, 0.75]) == pytest.approx(0.8370, abs=1e-4)

    def test_perfect_fooling(self):
        assert sr_adversarial_loss(np.full(4, 1 - LOG_EPS)) < 1e-6

    def test_saturation_is_clamped(self):
        assert math.isfinite(sr_adversarial_loss([0.0]))
        assert math.isfinite(float(sr_adversarial_loss(torch.zeros(3))))

    def test_tensor_and_array_agree(self, rng):
        d = rng.uniform(0.01, 0.99, 9)
        assert float(sr_adversarial_loss(torch.tensor(d))) == pytest.approx(sr_adversarial_loss(d), abs=1e-12)

    def test_gradient(self, rng):
        d0 = rng.uniform(0.05, 0.95, 6)
        d = torch.tensor(d0, requires_grad=True)
        sr_adversarial_loss(d).backward()
        numeric = central_difference(lambda v: sr_adversarial_loss(v), d0, 1e-6)
        assert max_relative_error(d.grad.numpy(), numeric) < 1e-3

    def test_discriminator_loss_labels(self):
        good = sr_discriminator_loss(torch.tensor([0.99]), torch.tensor([0.01]))
        bad = sr_discriminator_loss(torch.tensor([0.01]), torch.tensor([0.99]))
        assert float(good) < 0.05 < float(bad)


class TestTotal:
    def test_published_weight(self):
        assert abs(sr_total_loss(0.5, 1.0, SrLossWeights()) - 0.501) < 1e-9

    def test_zero_weight_is_l2(self):
        assert sr_total_loss(0.73, 5.0, SrLossWeights(0.0)) == 0.73

    def test_random_oracle(self, rng):
        for l2, adv, lam in rng.uniform(0, 10, (50, 3)):
            assert abs(sr_total_loss(l2, adv, SrLossWeights(lam)) - (l2 + lam * adv)) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1), st.floats(0, 1))
    def test_affine_in_lambda(self, l2, adv, la, lb):
        f = lambda lam: sr_total_loss(l2, adv, SrLossWeights(lam))
        assert f((la + lb) / 2) == pytest.approx((f(la) + f(lb)) / 2, rel=1e-9, abs=1e-9)

    def test_non_finite(self):
        with pytest.raises(TrainingDivergence):
            sr_total_loss(float("inf"), 0.1, SrLossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            SrLossWeights(-1.0)


class TwoLayerSr(nn.Module):
    """conv -> x8 sub-pixel shuffle -> tanh."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 4, 3, padding=1)
        self.conv2 = nn.Conv2d(4, 64, 3, padding=1)
        self.shuffle = nn.PixelShuffle(8)

    def forward(self, x):
        return torch.tanh(self.shuffle(self.conv2(torch.tanh(self.conv1(x)))))


def test_composite_sr_loss_gradient_matches_finite_differences(rng):
    torch.manual_seed(5)
    g = TwoLayerSr().double()
    d = SrDiscriminator(4, 2).double()
    lr = torch.tensor(rng.uniform(-1, 1, (2, 1, 4, 4)))
    hr = torch.tensor(rng.uniform(-1, 1, (2, 1, 32, 32)))
    w = SrLossWeights(0.1)

    def loss():
        sr = g(lr)
        return sr_total_loss(l2_loss(sr, hr), sr_adversarial_loss(d(sr)), w)

    assert finite_difference_check(loss, [g.conv1.weight, g.conv2.weight, g.conv2.bias], 8, rng) < 1e-3


@pytest.fixture(scope="module")
def g_s():
    torch.manual_seed(1)
    return SrGenerator(8, 1)


class TestSuperResolve:
    @pytest.mark.parametrize("size", [16, 32, 48])
    def test_shape_law_and_bounds(self, g_s, rng, size):
        out = super_resolve(g_s, rng.uniform(-1, 1, (size, size)))
        assert out.shape == (8 * size, 8 * size)
        assert out.min() >= -1 and out.max() <= 1

    def test_stack(self, g_s, rng):
        assert super_resolve(g_s, rng.uniform(-1, 1, (3, 8, 8))).shape == (3, 64, 64)

    def test_deterministic(self, g_s, rng):
        x = rng.uniform(-1, 1, (16, 16))
        np.testing.assert_array_equal(super_resolve(g_s, x), super_resolve(g_s, x))

    def test_non_square(self, g_s):
        with pytest.raises(ValueError, match="square"):
            super_resolve(g_s, np.zeros((16, 8)))

    def test_unnormalized(self, g_s):
        with pytest.raises(ValueError, match="normalized"):
            super_resolve(g_s, np.full((8, 8), 3.0))

    def test_default_generator_upscales_by_eight(self):
        assert SrGenerator.upscale_factor == 8
        with torch.no_grad():
            assert SrGenerator(16, 1)(torch.zeros(1, 1, 4, 4)).shape == (1, 1, 32, 32)

    def test_discriminator_range(self):
        out = SrDiscriminator(8, 3)(torch.rand(3, 1, 64, 64) * 2 - 1)
        assert out.shape == (3,) and torch.all((out > 0) & (out < 1))


@pytest.fixture(scope="module")
def frozen_setup(toy_patches):
    torch.manual_seed(11)
    g1 = TranslationGenerator(8, 1).eval()
    ds = build_synthetic_dataset(g1, toy_patches[0], PyramidSpec(8))
    return g1, ds


class TestTrainSr:
    def test_published_defaults(self):
        cfg = SrConfig()
        assert (cfg.epochs, cfg.minibatch, cfg.weights.lambda_adv) == (200, 64, 0.001)

    def test_g1_is_frozen(self, frozen_setup):
        g1, ds = frozen_setup
        before = weights_fingerprint(g1)
        res = train_sr(ds, g1, SrConfig(epochs=2, **TOY))
        assert weights_fingerprint(g1) == before
        g1_params = {id(p) for p in g1.parameters()}
        for opt in res.optimizers.values():
            for group in opt.param_groups:
                assert not g1_params & {id(p) for p in group["params"]}
            assert not g1_params & {id(p) for p in opt.state}
        assert all(p.grad is None for p in g1.parameters())

    def test_fingerprint_mismatch(self, frozen_setup):
        _, ds = frozen_setup
        other = TranslationGenerator(8, 1)
        with pytest.raises(FingerprintMismatch):
            train_sr(ds, other, SrConfig(epochs=1, **TOY))

    def test_empty_dataset(self, frozen_setup):
        g1, _ = frozen_setup
        empty = PairedDataset(np.zeros((0, 64, 64), np.float32), np.zeros((0, 8, 8), np.float32), weights_fingerprint(g1))
        with pytest.raises(ValueError):
            train_sr(empty, g1, SrConfig(epochs=1, **TOY))

    def test_training_curve_descends_in_most_seeds(self, frozen_setup):
        g1, ds = frozen_setup
        wins = 0
        for seed in range(3):
            res = train_sr(ds, g1, SrConfig(epochs=20, seed=seed, **TOY))
            g = res.history.column("g_total")
            assert len(g) == 20 and res.history.all_finite()
            wins += g[-1] < g[0]
        assert wins >= 2

    def test_deterministic(self, frozen_setup):
        g1, ds = frozen_setup
        a = train_sr(ds, g1, SrConfig(epochs=1, seed=3, **TOY))
        b = train_sr(ds, g1, SrConfig(epochs=1, seed=3, **TOY))
        assert weights_fingerprint(a.g_s) == weights_fingerprint(b.g_s)
