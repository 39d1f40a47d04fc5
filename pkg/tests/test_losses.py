import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phydae import losses as L
from phydae.image_core import ssim as ssim_metric
from phydae.nn import Tensor, grad_check
from phydae.nn import functional as F


def _rand(seed, shape, lo=0.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


# ---------------------------------------------------------------- bands
def test_band_masks_nonempty_and_nonnegative():
    spec = L.PhysicsBandSpec()
    for kind in ("haze", "noise", "lowlight", "blur"):
        for theta in (None, 0.3):
            w = spec.weight_map(kind, 16, 16, theta)
            assert w.min() >= 0 and w.any()
    with pytest.raises(ValueError):
        L.PhysicsBandSpec(bands={"haze": (0.0, 0.1)})
    with pytest.raises(ValueError):
        L.PhysicsBandSpec(bands={"haze": (0.5, 0.2), "noise": (0, 1), "lowlight": (0, 1), "blur": (0, 1)})


def test_freq_reg_zero_residual():
    assert float(L.physics_freq_reg(np.zeros((2, 8, 8, 3)), np.full((2, 4), 0.25)).data) == 0.0


def test_freq_reg_parseval():
    r = np.random.default_rng(0).normal(size=(3, 8, 10, 3))
    pi = np.random.default_rng(1).dirichlet(np.ones(4), size=3)
    reg = float(L.physics_freq_reg(r, pi, L.PhysicsBandSpec.full()).data)
    # direct spatial sum: per-sample mean square, averaged over the batch
    assert reg == pytest.approx(float((r ** 2).mean()), rel=1e-12)


def test_checkerboard_prefers_noise_band():
    yy, xx = np.mgrid[0:16, 0:16]
    r = np.repeat(((-1.0) ** (yy + xx))[None, :, :, None], 3, axis=3)
    e = L.band_energies(r, L.PhysicsBandSpec()).data[0]
    haze, noise = e[0], e[1]
    assert noise > haze
    assert noise == pytest.approx(1.0)  # all energy at the Nyquist corner


def test_directional_blur_band():
    spec = L.PhysicsBandSpec()
    # horizontal stripes carry energy along the vertical frequency axis only
    yy = np.arange(16)[:, None] * np.ones((1, 16))
    r = np.cos(2 * np.pi * 3 * yy / 16)[None, :, :, None]
    wmap_along = spec.weight_map("blur", 16, 16, theta=0.5)
    wmap_across = spec.weight_map("blur", 16, 16, theta=0.0)
    along = float(F.spectral_energy(Tensor(r), wmap_along).data[0])
    across = float(F.spectral_energy(Tensor(r), wmap_across).data[0])
    assert along > 0.99 * float((r ** 2).sum()) and across < 1e-12


def test_freq_reg_gradient():
    r = Tensor(np.random.default_rng(2).normal(size=(2, 8, 8, 3)), requires_grad=True)
    pi = Tensor(np.random.default_rng(3).dirichlet(np.ones(4), size=2), requires_grad=True)
    rep = grad_check(lambda: L.physics_freq_reg(r, pi), [r, pi])
    assert rep.passed, rep.to_dict()


# ---------------------------------------------------------------- W2
def test_w2_identical_batches_zero():
    x = _rand(4, (3, 8, 8, 3))
    assert float(L.w2_distance(x, x).data) == pytest.approx(0.0, abs=1e-9)


def test_w2_two_point_transport():
    a, b = np.array([[0.0]]), np.array([[1.0]])
    assert float(L.sliced_wasserstein(a, b, np.array([[1.0]])).data) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40))
def test_sliced_w2_matches_exact_1d(seed, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, 1)), rng.normal(1.0, 2.0, size=(m, 1))
    exact = float(np.mean((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2))
    got = float(L.sliced_wasserstein(a, b, np.array([[1.0]])).data)
    assert abs(got - exact) < 1e-9


def test_w2_permutation_invariant_and_errors():
    x, y = _rand(5, (4, 8, 8, 3)), _rand(6, (4, 8, 8, 3))
    d1 = float(L.w2_distance(x, y, seed=3).data)
    d2 = float(L.w2_distance(x[::-1], y, seed=3).data)
    assert d1 == pytest.approx(d2, abs=1e-12) and d1 > 0
    with pytest.raises(ValueError):
        L.w2_distance(x[:1], y[:1])
    with pytest.raises(ValueError):
        L.w2_distance(x, y[:, :4])


def test_random_directions_unit():
    d = L.random_directions(10, 7, seed=1)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(d, L.random_directions(10, 7, seed=1))


def test_w2_gradient():
    x = Tensor(_rand(7, (3, 8, 8, 3)), requires_grad=True)
    y = _rand(8, (3, 8, 8, 3))
    rep = grad_check(lambda: L.w2_distance(x, y, n_proj=8), [x])
    assert rep.passed, rep.to_dict()


def test_daot_composition():
    x, y = _rand(9, (2, 8, 8, 3)), _rand(10, (2, 8, 8, 3))
    r = np.random.default_rng(11).normal(0, 0.1, size=(2, 8, 8, 3))
    pi = np.full((2, 4), 0.25)
    d0, w2, reg = L.daot_loss(x, y, r, pi, lambda_freq=0.0)
    assert float(d0.data) == float(w2.data)
    d1, _, _ = L.daot_loss(x, y, r, pi, lambda_freq=0.5)
    d2, _, _ = L.daot_loss(x, y, r, pi, lambda_freq=1.0)
    share1 = float(d1.data) - float(w2.data)
    share2 = float(d2.data) - float(w2.data)
    assert share2 == pytest.approx(2 * share1, rel=1e-12)
    assert share1 == pytest.approx(0.5 * float(reg.data), rel=1e-12)
    z, _, _ = L.daot_loss(x, x, np.zeros_like(r), pi)
    assert float(z.data) == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------- pixel
def test_pixel_loss_identity_and_pure_l1():
    x = _rand(12, (2, 8, 8, 3))
    assert float(L.pixel_loss(x, x, "haze").total.data) == pytest.approx(0.0, abs=1e-12)
    beta = {k: (1.0, 0.0, 0.0) for k in L.DEFAULT_BETA}
    a, b = np.full((1, 8, 8, 3), 0.2), np.full((1, 8, 8, 3), 0.5)
    assert float(L.pixel_loss(a, b, ["noise"], beta).total.data) == pytest.approx(0.3, abs=1e-12)
    with pytest.raises(ValueError):
        L.pixel_loss(a, b[:, :4], "haze")
    with pytest.raises(ValueError):
        L.pixel_loss(a, b, ["haze", "noise"])


def test_fft_term_small_transform_oracle():
    rng = np.random.default_rng(13)
    a, b = rng.uniform(size=(1, 4, 4, 1)), rng.uniform(size=(1, 4, 4, 1))

    def dft_mag(img, n):
        out = np.zeros((n, n))
        for u in range(n):
            for v in range(n):
                s = sum(img[y, x] * np.exp(-2j * np.pi * (u * y + v * x) / n)
                        for y in range(n) for x in range(n))
                out[u, v] = abs(s) / n
        return out

    ref = np.abs(dft_mag(a[0, :, :, 0], 4) - dft_mag(b[0, :, :, 0], 4)).mean()
    got = float(F.abs(F.fft_magnitude(a) - F.fft_magnitude(b)).mean().data)
    assert got == pytest.approx(ref, abs=1e-6)
    # inside the pixel loss (8x8 so the SSIM window fits)
    a8, b8 = rng.uniform(size=(1, 8, 8, 1)), rng.uniform(size=(1, 8, 8, 1))
    ref8 = np.abs(dft_mag(a8[0, :, :, 0], 8) - dft_mag(b8[0, :, :, 0], 8)).mean()
    beta = {k: (0.0, 1.0, 0.0) for k in L.DEFAULT_BETA}
    terms = L.pixel_loss(a8, b8, "blur", beta)
    assert float(terms.fft.data) == pytest.approx(ref8, abs=1e-6)
    assert float(terms.total.data) == pytest.approx(ref8, abs=1e-6)


def test_ssim_per_sample_matches_metric():
    x, y = _rand(14, (2, 12, 12, 3)), _rand(15, (2, 12, 12, 3))
    got = L.ssim_per_sample(x, y).data
    for i in range(2):
        assert got[i] == pytest.approx(ssim_metric(x[i], y[i]), abs=1e-10)


def test_pixel_loss_gradient():
    x = Tensor(_rand(16, (2, 8, 8, 3), 0.2, 0.8), requires_grad=True)
    y = _rand(17, (2, 8, 8, 3))
    rep = grad_check(lambda: L.pixel_loss(x, y, ["haze", "blur"]).total, [x])
    assert rep.passed, rep.to_dict()


# ---------------------------------------------------------------- balance
def test_balance_values():
    assert float(L.balance_loss(np.full(4, 0.25)).data) == 0.0
    assert float(L.balance_loss(np.array([1.0, 0, 0, 0])).data) == pytest.approx(3.0, abs=1e-6)
    with pytest.raises(ValueError):
        L.balance_loss(np.zeros(4))
    with pytest.raises(ValueError):
        L.balance_loss(np.array([0.5, -0.1, 0.3, 0.3]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_balance_scale_invariant(seed, c):
    w = np.random.default_rng(seed).dirichlet(np.ones(4))
    # exact with eps = 0; the default eps shifts the value by a relative eps / mean^2
    a, b = float(L.balance_loss(w, eps=0.0).data), float(L.balance_loss(c * w, eps=0.0).data)
    assert abs(a - b) < 1e-9 * max(1.0, a)
    mu2 = (c * w).mean() ** 2
    expected = float(L.balance_loss(c * w, eps=0.0).data) * mu2 / (mu2 + L.BALANCE_EPS)
    assert float(L.balance_loss(c * w).data) == pytest.approx(expected, rel=1e-12)


def test_balance_gradient():
    m = Tensor(np.array([0.4, 0.3, 0.2, 0.1]), requires_grad=True)
    rep = grad_check(lambda: L.balance_loss(m), [m])
    assert rep.passed, rep.to_dict()


# ---------------------------------------------------------------- contrastive
def test_contrastive_identical_pair_zero():
    z = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert float(L.contrastive_loss(z, [1, 1]).data) == pytest.approx(0.0, abs=1e-12)


def test_contrastive_no_positive():
    z = np.eye(2)
    with pytest.raises(L.NoPositivePairsError):
        L.contrastive_loss(z, [0, 1])
    assert float(L.contrastive_loss(z, [0, 1], on_empty="zero").data) == 0.0


def test_contrastive_direct_evaluation():
    rng = np.random.default_rng(18)
    z = rng.normal(size=(4, 3))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    labels = np.array([0, 0, 1, 2])
    tau = 0.5
    s = z @ z.T / tau
    total = []
    for i in range(2):
        j = 1 - i
        others = [k for k in range(4) if k != i]
        total.append(-(s[i, j] - np.log(np.exp(s[i, others]).sum())))
    assert float(L.contrastive_loss(z, labels, tau).data) == pytest.approx(np.mean(total), abs=1e-12)


def test_contrastive_monotone_in_positive_similarity():
    def loss(angle):
        # the negative is orthogonal to both positives at every angle
        z = np.array([[1.0, 0.0, 0.0], [math.cos(angle), math.sin(angle), 0.0], [0.0, 0.0, 1.0]])
        return float(L.contrastive_loss(z, [0, 0, 1], 0.2).data)

    vals = [loss(a) for a in (1.2, 0.9, 0.6, 0.3, 0.0)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_contrastive_rotation_invariant():
    rng = np.random.default_rng(19)
    z = rng.normal(size=(6, 5))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    labels = [0, 1, 0, 1, 2, 2]
    a = float(L.contrastive_loss(z, labels).data)
    b = float(L.contrastive_loss(z @ q, labels).data)
    assert a == pytest.approx(b, abs=1e-10)


def test_contrastive_gradient():
    z = Tensor(np.random.default_rng(20).normal(size=(5, 4)), requires_grad=True)
    rep = grad_check(lambda: L.contrastive_loss(F.l2_normalize(z, axis=-1), [0, 1, 0, 1, 2], 0.3), [z])
    assert rep.passed, rep.to_dict()


# ---------------------------------------------------------------- total
def test_total_values():
    assert L.total_loss(0, 0, 0, 0).total == 0.0
    assert L.total_loss(1.0, 1.0, 1.0, 1.0).total == 2.11
    rep = L.total_loss(0.3, 0.7, 2.0, 1.5, breakdown={"w2": 0.1})
    w = L.LossWeights()
    recomposed = rep.daot + w.lambda1 * rep.pixel + w.lambda2 * rep.balance + w.lambda3 * rep.contrast
    assert abs(rep.total - recomposed) < 1e-9
    assert rep.to_dict()["w2"] == 0.1
    with pytest.raises(ValueError):
        L.total_loss(float("nan"), 0, 0, 0)
    with pytest.raises(ValueError):
        L.LossWeights(lambda2=-1.0)


def test_combine_tensors_matches_floats():
    parts = [Tensor(np.array(v)) for v in (0.5, 0.25, 3.0, 1.0)]
    t = L.combine(*parts)
    assert float(t.data) == pytest.approx(L.total_loss(0.5, 0.25, 3.0, 1.0).total, abs=1e-15)
