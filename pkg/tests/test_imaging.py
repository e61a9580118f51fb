import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmsr.imaging import (
    PyramidSpec,
    SsimParams,
    gaussian_downsample,
    reflect_indices,
    ssim,
    ssim_loss,
    upsample_bicubic,
)
from oracles import central_difference, max_relative_error, pyramid_down_bruteforce, ssim_direct

finite = st.floats(-1, 1, allow_nan=False, width=64)


def test_256_to_32_shape_law():
    out = gaussian_downsample(np.zeros((256, 256)), PyramidSpec(factor=8))
    assert out.shape == (32, 32)


def test_constant_image_is_preserved():
    out = gaussian_downsample(np.full((64, 64), 0.37), PyramidSpec(8))
    assert np.max(np.abs(out - 0.37)) < 1e-6


def test_impulse_matches_bruteforce():
    img = np.zeros((32, 32))
    img[16, 16] = 1.0
    ours = gaussian_downsample(img, PyramidSpec(8))
    ref = pyramid_down_bruteforce(img, 8)
    assert np.max(np.abs(ours - ref)) < 1e-6


def test_indivisible_dims_rejected():
    with pytest.raises(ValueError, match="divisible"):
        gaussian_downsample(np.zeros((60, 64)), PyramidSpec(8))


@pytest.mark.parametrize("factor", [3, 32])
def test_factor_must_be_supported(factor):
    with pytest.raises(ValueError):
        PyramidSpec(factor=factor)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        PyramidSpec(kernel_size=4)


def test_reflect_indices_agree_with_numpy_pad():
    for n in (1, 2, 3, 7):
        for pad in (1, 2, 5):
            if n == 1:
                continue
            ref = np.pad(np.arange(n), pad, mode="reflect")
            np.testing.assert_array_equal(reflect_indices(n, pad), ref)


def test_downsample_batches_and_volumes():
    rng = np.random.default_rng(1)
    batch = rng.uniform(-1, 1, (3, 16, 16))
    out = gaussian_downsample(batch, PyramidSpec(4))
    for k in range(3):
        np.testing.assert_allclose(out[k], gaussian_downsample(batch[k], PyramidSpec(4)), atol=1e-12)
    vol = gaussian_downsample(rng.uniform(size=(16, 16, 16)), PyramidSpec(8), ndim=3)
    assert vol.shape == (2, 2, 2)


def test_downsample_keeps_torch_and_grad():
    x = torch.rand(2, 1, 16, 16, dtype=torch.float64, requires_grad=True)
    y = gaussian_downsample(x, PyramidSpec(2))
    assert isinstance(y, torch.Tensor) and y.shape == (2, 1, 8, 8)
    y.sum().backward()
    assert x.grad is not None


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (16, 16), elements=finite), st.floats(-5, 5, allow_nan=False))
def test_downsample_commutes_with_offset(img, c):
    f = lambda a: gaussian_downsample(a, PyramidSpec(4))
    assert np.max(np.abs(f(img + c) - (f(img) + c))) < 1e-6


def test_ssim_identity_is_exact(rng):
    a = rng.uniform(-1, 1, (32, 32))
    assert ssim(a, a) == 1.0


def test_ssim_equal_constants():
    assert ssim(np.full((8, 8), 0.3), np.full((8, 8), 0.3)) == pytest.approx(1.0, abs=1e-15)


def test_ssim_matches_direct_formula(rng):
    a, b = rng.uniform(-1, 1, (2, 32, 32))
    assert abs(ssim(a, b) - ssim_direct(a, b)) < 1e-6


def test_ssim_default_stabilizers():
    p = SsimParams()
    assert (p.c1, p.c2) == (0.02, 0.06)


def test_ssim_custom_stabilizers(rng):
    a, b = rng.uniform(-1, 1, (2, 8, 8))
    p = SsimParams(c1=0.1, c2=0.3)
    assert ssim(a, b, p) == pytest.approx(ssim_direct(a, b, 0.1, 0.3), abs=1e-12)


def test_ssim_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        ssim(np.zeros((8, 8)), np.zeros((8, 4)))


def test_ssim_needs_two_pixels():
    with pytest.raises(ValueError):
        ssim(np.zeros((1, 1)), np.zeros((1, 1)))


def test_ssim_rejects_nonpositive_stabilizers():
    with pytest.raises(ValueError):
        SsimParams(c1=0.0)


def test_sliding_window_is_mean_of_window_scores(rng):
    a, b = rng.uniform(-1, 1, (2, 12, 12))
    p = SsimParams(window="sliding", window_size=4, stride=4)
    expected = np.mean(
        [ssim_direct(a[i:i + 4, j:j + 4], b[i:i + 4, j:j + 4]) for i in range(0, 9, 4) for j in range(0, 9, 4)]
    )
    assert ssim(a, b, p) == pytest.approx(expected, abs=1e-12)
    assert ssim(a, a, p) == 1.0


def test_batched_ssim_returns_per_image(rng):
    a, b = rng.uniform(-1, 1, (2, 4, 8, 8))
    out = ssim(a, b)
    assert out.shape == (4,)
    for k in range(4):
        assert out[k] == pytest.approx(ssim_direct(a[k], b[k]), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 6), elements=finite), arrays(np.float64, (6, 6), elements=finite))
def test_ssim_symmetric_and_bounded(a, b):
    s_ab, s_ba = ssim(a, b), ssim(b, a)
    assert abs(s_ab - s_ba) <= 1e-12
    assert -1 - 1e-12 <= s_ab <= 1 + 1e-12
    assert 0 - 1e-12 <= ssim_loss(a, b) <= 2 + 1e-12


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 5), elements=finite))
def test_ssim_self_similarity(a):
    assert ssim(a, a) == 1.0
    assert ssim_loss(a, a) == 0.0


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (4, 4), elements=finite),
    arrays(np.float64, (4, 4), elements=finite),
    st.permutations(list(range(16))),
)
def test_global_ssim_permutation_invariant(a, b, perm):
    pa = a.ravel()[perm].reshape(4, 4)
    pb = b.ravel()[perm].reshape(4, 4)
    assert ssim(pa, pb) == pytest.approx(ssim(a, b), abs=1e-12)


@pytest.mark.parametrize("wrt", ["a", "b"])
def test_ssim_loss_gradient_matches_finite_differences(rng, wrt):
    a0, b0 = rng.uniform(-1, 1, (2, 8, 8))
    ta = torch.tensor(a0, requires_grad=True)
    tb = torch.tensor(b0, requires_grad=True)
    ssim_loss(ta, tb).backward()
    if wrt == "a":
        analytic = ta.grad.numpy()
        numeric = central_difference(lambda v: ssim_loss(v, b0), a0, 1e-4)
    else:
        analytic = tb.grad.numpy()
        numeric = central_difference(lambda v: ssim_loss(a0, v), b0, 1e-4)
    assert max_relative_error(analytic, numeric) < 1e-3


def test_bicubic_upsample_shape_and_bounds(rng):
    up = upsample_bicubic(rng.uniform(-1, 1, (3, 4, 4)), 8)
    assert up.shape == (3, 32, 32)
    assert up.min() >= -1 and up.max() <= 1
