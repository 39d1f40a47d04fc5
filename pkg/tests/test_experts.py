import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phydae import CLASS_ORDER
from phydae.degrade import apply_haze, apply_lowlight
from phydae.experts import (NOISE_TIERS, DeblurExpert, DehazeExpert, DenoiseExpert, ExpertBank,
                            LowlightExpert, direction_weights, directional_sharpen, expert_apply,
                            fuse_tiers, gaussian_kernel_1d, gaussian_kernel_2d,
                            invert_scattering, retinex_correct, tier_weight)
from phydae.image_core import psnr
from phydae.nn import Tensor, grad_check

EXPERTS = {"haze": DehazeExpert, "noise": DenoiseExpert, "lowlight": LowlightExpert,
           "blur": DeblurExpert}


def _img(seed, shape=(1, 16, 16, 3), lo=0.2, hi=0.8):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


def _make(kind, seed=0, cond_dim=4):
    return EXPERTS[kind](3, 6, cond_dim, 2, np.random.default_rng(seed))


def _wake_film(expert, seed=1):
    """Give the zero-initialised FiLM up-projection nonzero weights."""
    up = expert.trunk.film.up.weight
    up.data[...] = np.random.default_rng(seed).normal(0, 0.1, size=up.shape)


# ---------------------------------------------------------------- kernels
def test_gaussian_kernels_normalised():
    k1 = gaussian_kernel_1d(1.0, 5)
    assert k1.shape == (5,) and abs(k1.sum() - 1) < 1e-15
    np.testing.assert_allclose(k1, k1[::-1])
    k2 = gaussian_kernel_2d(2.0)
    assert k2.shape[0] % 2 == 1 and abs(k2.sum() - 1) < 1e-12


# ---------------------------------------------------------------- dehaze
def test_invert_scattering_closed_form():
    J = invert_scattering(np.full((1, 2, 2, 3), 0.58), 0.8, 0.9).data
    np.testing.assert_allclose(J, 0.5, atol=1e-6)


def test_dehaze_oracle_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(5):
        clean = rng.uniform(0, 1, size=(32, 32, 3))
        t, A = rng.uniform(0.3, 0.9), rng.uniform(0.7, 1.0, size=3)
        hazy = apply_haze(clean, t, A).data
        rec = DehazeExpert.oracle(hazy[None], t, A).data[0]
        assert psnr(rec, clean) >= 60.0


def test_dehaze_parameter_ranges():
    ex = _make("haze")
    p = ex.estimate(Tensor(_img(2, lo=0.0, hi=1.0)), None)
    s = p.s_rgb.data
    assert np.all(p.t_rgb.data > 0) and np.all(p.t_rgb.data <= s)
    assert np.all(p.t.data > 0) and np.all(p.t.data <= 1)
    assert np.all((p.A.data >= 0) & (p.A.data <= 1))
    assert 0 <= float(p.w_mix.data.min()) and float(p.w_mix.data.max()) <= 1
    # A_global is the mean over the brightest 10% of pixels per channel
    x = _img(2, lo=0.0, hi=1.0)[0].reshape(-1, 3)
    top = np.sort(x, axis=0)[-math.ceil(0.1 * 256):].mean(axis=0)
    np.testing.assert_allclose(p.A_global.data.reshape(3), top, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_dehaze_t_rgb_bounded_for_any_weights(seed):
    ex = _make("haze", seed)
    rng = np.random.default_rng(seed)
    ex.t_head.weight.data[...] = rng.normal(0, 5, size=ex.t_head.weight.shape)
    ex.s_raw.data[...] = rng.normal(0, 3, size=3)
    p = ex.estimate(Tensor(_img(seed, (1, 8, 8, 3), 0, 1)), None)
    assert np.all(p.t_rgb.data > 0)
    assert np.all(p.t_rgb.data <= p.s_rgb.data.reshape(1, 1, 1, 3) + 1e-15)


# ---------------------------------------------------------------- denoise
def test_tier_weight_values():
    mu, sd = NOISE_TIERS[1]
    assert float(tier_weight(np.array([mu]), mu, sd).data[0]) == 1.0
    assert float(tier_weight(np.array([mu + sd]), mu, sd).data[0]) == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_fusion_of_identical_outputs():
    f = Tensor(_img(4))
    rng = np.random.default_rng(5)
    ws = [Tensor(rng.uniform(0.1, 1.0, size=(1, 16, 16, 1))) for _ in range(3)]
    np.testing.assert_allclose(fuse_tiers([f, f, f], ws).data, f.data, atol=1e-7)


def test_denoise_params_finite():
    out, p = _make("noise")(_img(6))
    assert out.shape == (1, 16, 16, 3)
    assert np.all(p.sigma_map.data > 0)
    assert all(np.isfinite(w.data).all() for w in p.weights)
    assert all(sd > 0 for _, sd in p.tiers)


# ---------------------------------------------------------------- low light
def test_retinex_values():
    x = _img(7)
    np.testing.assert_allclose(LowlightExpert.oracle(x, 1.0, 1.0).data, x / (1 + 1e-6), atol=1e-12)
    v = retinex_correct(np.full((1, 1, 1, 1), 0.25), 1.0, 2.0, eps=0.0).data
    assert v.item() == pytest.approx(0.5, abs=1e-15)


def test_lowlight_oracle_round_trip():
    rng = np.random.default_rng(8)
    for _ in range(5):
        clean = rng.uniform(0, 1, size=(32, 32, 3))
        gamma = rng.uniform(1.5, 3.5)
        dark = apply_lowlight(clean, gamma).data
        rec = LowlightExpert.oracle(dark[None], 1.0, gamma).data[0]
        assert psnr(rec, clean) >= 60.0


def test_lowlight_params_positive():
    ex = _make("lowlight")
    p = ex.estimate(Tensor(_img(9, lo=0, hi=1)), None)
    assert np.all(p.L.data > 0) and np.all(p.gamma_map.data > 0)
    out, _ = ex(_img(9))
    assert np.isfinite(out.data).all()


# ---------------------------------------------------------------- deblur
def test_direction_weights_values():
    np.testing.assert_allclose(direction_weights(np.array([0.0]), np.array([0.3])).data[0],
                               [0.5761, 0.2119, 0.2119], atol=1e-4)
    np.testing.assert_allclose(direction_weights(np.array([1.0]), np.array([0.0])).data[0],
                               [0.0900, 0.6652, 0.2447], atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0, 5), theta=st.floats(0, 0.999))
def test_direction_weights_simplex(a, theta):
    w = direction_weights(np.array([a]), np.array([theta])).data[0]
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-6


def test_sharpen_kappa_zero_identity():
    x = _img(10)
    w = direction_weights(np.array([0.4]), np.array([0.2]))
    np.testing.assert_array_equal(directional_sharpen(x, np.array([0.0]), w).data, x)


def test_deblur_a_matches_sigma_gap():
    _, p = _make("blur")(_img(11))
    np.testing.assert_allclose(p.a.data, np.abs(p.sigma_x.data - p.sigma_y.data))
    assert np.all(p.kappa.data >= 0)
    assert abs(p.w_dir.data.sum() - 1) < 1e-6


# ---------------------------------------------------------------- shared contracts
@pytest.mark.parametrize("kind", CLASS_ORDER)
def test_zero_conditioning_equals_unconditioned(kind):
    ex = _make(kind)
    _wake_film(ex)
    x = _img(12)
    a, _ = ex(x, None)
    b, _ = ex(x, Tensor(np.zeros((1, 16, 16, 4))))
    np.testing.assert_array_equal(a.data, b.data)
    assert a.shape == x.shape
    c, _ = ex(x, Tensor(np.random.default_rng(0).normal(size=(1, 16, 16, 4))))
    assert not np.array_equal(a.data, c.data)


@pytest.mark.parametrize("kind", CLASS_ORDER)
def test_conditioning_shape_checked(kind):
    with pytest.raises(ValueError):
        _make(kind)(_img(13), Tensor(np.zeros((1, 8, 8, 4))))


@pytest.mark.parametrize("kind", CLASS_ORDER)
def test_expert_gradients(kind):
    ex = _make(kind, seed=3)
    _wake_film(ex, seed=4)
    x = Tensor(_img(14, lo=0.3, hi=0.7), requires_grad=True)
    cond = Tensor(np.random.default_rng(15).normal(0, 0.5, size=(1, 16, 16, 4)), requires_grad=True)
    w = np.random.default_rng(16).normal(size=(1, 16, 16, 3))

    def f():
        return (ex(x, cond)[0] * w).sum()

    out = ex(x, cond)[0].data
    assert 0.0 < out.min() and out.max() < 1.0, "fixture must avoid the clamp"
    rep = grad_check(f, [x, cond] + list(ex.parameters()), tolerance=1e-4, max_coords=8, name=kind)
    assert rep.passed, rep.to_dict()


def test_bank_dispatch_and_counts():
    bank = ExpertBank(3, 6, 4, 2, np.random.default_rng(0))
    assert len(bank) == 4
    x = _img(17, (2, 16, 16, 3))
    bank.apply(0, x)
    bank.apply(3, x[:1])

    class Emb:
        levels = [Tensor(np.zeros((2, 16, 16, 4)))]

    expert_apply(bank, 2, x, Emb())
    assert bank.calls.tolist() == [2, 0, 2, 1]
    for bad in (4, -1, "haze", 1.0):
        with pytest.raises(KeyError):
            bank.apply(bad, x)
    bank.reset_counts()
    assert bank.calls.sum() == 0
