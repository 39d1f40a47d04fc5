import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phydae.nn import (AdamW, Conv2d, GroupNorm, Linear, Param, Tensor, count_macs, grad_check,
                       no_grad, trace_layers, warmup_cosine)
from phydae.nn import functional as F
from phydae.nn import kernels
from phydae.nn import _pykernels


def naive_conv(x, w, b, stride, groups, pad_mode):
    """Direct loop cross-correlation used as an independent reference."""
    n, h, wd, cin = x.shape
    kh, kw, cpg, cout = w.shape
    ph, pw = ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2)
    if pad_mode == "valid":
        xp = x
    else:
        xp = np.pad(x, ((0, 0), ph, pw, (0, 0)), mode="reflect" if pad_mode == "reflect" else "constant")
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    opg = cout // groups
    for o in range(cout):
        g = o // opg
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw, g * cpg:(g + 1) * cpg]
                out[:, i, j, o] = (patch * w[:, :, :, o]).sum(axis=(1, 2, 3))
    if b is not None:
        out += b
    return out


@pytest.mark.parametrize("cin,cout,k,stride,groups,pad", [
    (3, 4, 3, 1, 1, "reflect"),
    (4, 6, 3, 2, 2, "reflect"),
    (4, 4, 3, 1, 4, "reflect"),
    (4, 8, 1, 1, 1, "reflect"),
    (2, 3, 5, 1, 1, "zeros"),
    (2, 3, 3, 1, 1, "valid"),
    (6, 6, 7, 1, 6, "reflect"),
])
def test_conv2d_matches_direct_loop(cin, cout, k, stride, groups, pad):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 9, 8, cin))
    w = rng.normal(size=(k, k, cin // groups, cout))
    b = rng.normal(size=cout)
    got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, groups=groups, padding=pad).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, groups, pad), atol=1e-12)


@pytest.mark.parametrize("stride,groups,k", [(1, 1, 3), (2, 1, 3), (1, 4, 3), (1, 2, 5), (2, 4, 1)])
def test_conv2d_gradients(stride, groups, k):
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 7, 6, 4)), requires_grad=True)
    w = Param(rng.normal(size=(k, k, 4 // groups, 4)))
    b = Param(rng.normal(size=4))
    probe = rng.normal(size=F.conv2d(x, w, b, stride, groups).shape)
    rep = grad_check(lambda: (F.conv2d(x, w, b, stride, groups) * probe).sum(), [x, w, b], name="conv")
    assert rep.passed, rep.to_dict()


def test_conv_output_extent_rule():
    x = Tensor(np.zeros((1, 7, 5, 2)))
    w = Tensor(np.zeros((3, 3, 2, 2)))
    assert F.conv2d(x, w, stride=2).shape == (1, 4, 3, 2)
    assert F.conv2d(x, w).shape == (1, 7, 5, 2)


def test_backends_agree():
    if "cython" not in kernels.available_backends():
        pytest.skip("compiled kernels not built")
    from phydae.nn import _ckernels
    rng = np.random.default_rng(3)
    xp = rng.normal(size=(2, 10, 9, 3))
    n, hp, wp, c = xp.shape
    for kh, kw, s in [(3, 3, 1), (5, 5, 2), (1, 5, 1)]:
        ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
        a = _pykernels.im2col(xp, kh, kw, s, ho, wo)
        np.testing.assert_array_equal(a, _ckernels.im2col(xp, kh, kw, s, ho, wo))
        cols = rng.normal(size=a.shape)
        np.testing.assert_allclose(_pykernels.col2im(cols, n, hp, wp, c, kh, kw, s, ho, wo),
                                   _ckernels.col2im(cols, n, hp, wp, c, kh, kw, s, ho, wo), atol=1e-12)
        w = rng.normal(size=(kh, kw, c))
        np.testing.assert_allclose(_pykernels.dw_forward(xp, w, s, ho, wo),
                                   _ckernels.dw_forward(xp, w, s, ho, wo), atol=1e-12)
        g = rng.normal(size=(n, ho, wo, c))
        np.testing.assert_allclose(_pykernels.dw_backward_input(g, w, hp, wp, s),
                                   _ckernels.dw_backward_input(g, w, hp, wp, s), atol=1e-12)
        np.testing.assert_allclose(_pykernels.dw_backward_weight(xp, g, kh, kw, s),
                                   _ckernels.dw_backward_weight(xp, g, kh, kw, s), atol=1e-12)


def test_fallback_backend_selected_by_env():
    import subprocess
    import sys
    code = "from phydae.nn import kernels; print(kernels.BACKEND)"
    env = {**__import__("os").environ, "PHYDAE_KERNELS": "python"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_softmax_reference_values():
    p = F.softmax(Tensor(np.array([1.0, 0.0, 0.0]))).data
    np.testing.assert_allclose(p, [0.5761, 0.2119, 0.2119], atol=1e-4)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_simplex_and_shift(values, shift):
    v = np.array(values)
    p = F.softmax(Tensor(v)).data
    assert (p >= 0).all() and abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(F.softmax(Tensor(v + shift)).data, p, atol=1e-9)


def test_gelu_values():
    assert F.gelu(Tensor(np.array(0.0))).data == 0.0
    assert abs(F.gelu(Tensor(np.array(10.0))).data - 10.0) < 1e-9
    assert abs(F.gelu(Tensor(np.array(-10.0))).data) < 1e-9


@pytest.mark.parametrize("name,fn,lo,hi", [
    ("exp", F.exp, -2, 2), ("log", F.log, 0.2, 2), ("sqrt", F.sqrt, 0.2, 2),
    ("tanh", F.tanh, -2, 2), ("sigmoid", F.sigmoid, -4, 4), ("softplus", F.softplus, -4, 4),
    ("gelu", F.gelu, -3, 3), ("cos", F.cos, -3, 3), ("sin", F.sin, -3, 3),
])
def test_elementwise_gradients(name, fn, lo, hi):
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(lo, hi, size=(3, 4)), requires_grad=True)
    w = rng.normal(size=(3, 4))
    assert grad_check(lambda: (fn(x) * w).sum(), [x], name=name).passed


def test_structural_gradients():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 8, 8, 4)), requires_grad=True)
    g = Param(rng.normal(size=4))
    b = Param(rng.normal(size=4))
    cases = {
        "group_norm": lambda: F.group_norm(x, g, b, 2),
        "softmax": lambda: F.softmax(x, axis=-1),
        "log_softmax": lambda: F.log_softmax(x, axis=-1),
        "adaptive_pool": lambda: F.adaptive_avg_pool2d(x, (3, 3)),
        "avg_pool": lambda: F.avg_pool(x, 2),
        "upsample": lambda: F.upsample2x(x),
        "l2_normalize": lambda: F.l2_normalize(x, axis=-1),
        "spectral": lambda: F.spectral_energy(x, np.ones((8, 8))),
        "fft_mag": lambda: F.fft_magnitude(x),
        "depthwise": lambda: F.depthwise_filter(x, np.arange(9.0).reshape(3, 3)),
    }
    for name, fn in cases.items():
        probe = rng.normal(size=fn().shape)
        rep = grad_check(lambda: (fn() * probe).sum(), [x, g, b] if name == "group_norm" else [x], name=name)
        assert rep.passed, rep.to_dict()


def test_linear_and_matmul_gradients():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w = Param(rng.normal(size=(3, 2)))
    b = Param(rng.normal(size=2))
    assert grad_check(lambda: (F.linear(x, w, b) ** 2).sum(), [x, w, b]).passed
    assert grad_check(lambda: ((x @ w) * (x @ w)).mean(), [x, w]).passed


def test_adaptive_pool_quadrants():
    x = np.zeros((1, 4, 4, 1))
    x[0, :2, :2, 0] = 1.0
    x[0, :2, 2:, 0] = 2.0
    x[0, 2:, :2, 0] = 3.0
    x[0, 2:, 2:, 0] = 4.0
    out = F.adaptive_avg_pool2d(Tensor(x), (2, 2)).data[0, :, :, 0]
    np.testing.assert_array_equal(out, [[1, 2], [3, 4]])


def test_group_norm_normalises_each_group():
    rng = np.random.default_rng(7)
    x = rng.normal(3.0, 5.0, size=(2, 6, 6, 8))
    y = F.group_norm(Tensor(x), np.ones(8), np.zeros(8), 4).data.reshape(2, 6, 6, 4, 2)
    np.testing.assert_allclose(y.mean(axis=(1, 2, 4)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(1, 2, 4)), 1.0, atol=1e-4)


def test_layer_param_counts_and_trace():
    rng = np.random.default_rng(0)
    assert Conv2d(4, 8, 3, rng).n_params() == 296
    assert Conv2d(8, 8, 3, rng, groups=8).n_params() == 3 * 3 * 8 + 8
    assert Linear(4, 3, rng).n_params() == 15
    with trace_layers() as tr:
        Conv2d(4, 4, 3, rng, groups=4, stride=2)(Tensor(np.zeros((1, 6, 6, 4))))
        GroupNorm(4, 2)(Tensor(np.ones((1, 2, 2, 4))))
    assert tr == ["Conv3x3[dw]/s2", "GroupNorm"]
    with count_macs() as macs:
        Conv2d(4, 8, 3, rng)(Tensor(np.zeros((2, 5, 5, 4))))
    assert macs[0] == 2 * 25 * 9 * 4 * 8


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = F.exp(x) * 2.0
    assert y._parents == () or not y.requires_grad


def test_gradient_accumulates_over_shared_use():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    (x * x + x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_gradcheck_reports_failure_on_wrong_gradient():
    from phydae.nn.tensor import make
    x = Tensor(np.array([0.3, 0.7]), requires_grad=True)

    def bad():
        return make(x.data ** 2, (x,), lambda g: (g * 3.0,), "bad").sum()

    assert not grad_check(bad, [x]).passed


def test_adamw_zero_lr_is_null_update():
    p = Param(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, 0.5])
    opt = AdamW([p], lr=0.0)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_moves_by_lr():
    p = Param(np.array([1.0]))
    p.grad = np.array([4.0])
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    assert abs(p.data[0] - 0.9) < 1e-6


def test_warmup_cosine_schedule():
    assert warmup_cosine(0, 100, 10, 1e-3, 1e-6) == pytest.approx(1e-4)
    assert warmup_cosine(9, 100, 10, 1e-3, 1e-6) == pytest.approx(1e-3)
    assert abs(warmup_cosine(99, 100, 10, 1e-3, 1e-6) - 1e-6) < 1e-9
    lrs = [warmup_cosine(s, 100, 10, 1e-3, 1e-6) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sort_and_topk_gradients():
    rng = np.random.default_rng(8)
    x = Tensor(rng.permutation(24).reshape(6, 4) * 0.1 + rng.uniform(0, 0.01, size=(6, 4)), requires_grad=True)
    w = rng.normal(size=(6, 4))
    assert grad_check(lambda: (F.sort_rows(x) * w).sum(), [x]).passed
    assert grad_check(lambda: (F.topk_mean(x, 2, axis=0) * w[0]).sum(), [x]).passed
    np.testing.assert_allclose(F.topk_mean(Tensor(np.array([[1.0, 5.0, 3.0, 4.0]])), 2).data, [4.5])


def test_snap_is_exact_for_residual_arithmetic():
    rng = np.random.default_rng(9)
    y = F.snap(Tensor(rng.uniform(size=1000))).data
    c = F.snap(Tensor(rng.uniform(size=1000) ** 7)).data
    assert np.array_equal(c + (y - c), y)


def test_gelu_gradient_at_large_magnitude_is_finite():
    x = Tensor(np.array([-40.0, 40.0]), requires_grad=True)
    F.gelu(x).sum().backward()
    assert np.isfinite(x.grad).all()
    assert math.isclose(x.grad[1], 1.0, abs_tol=1e-9)
