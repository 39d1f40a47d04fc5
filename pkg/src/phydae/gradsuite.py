"""Finite-difference verification suite covering every trainable operator.

Each case builds a small randomized fixture (16x16 for spatial operators),
contracts the output with a fixed random probe and compares analytic and
central-difference gradients. The full two-stage composite runs at a looser
tolerance because it chains dozens of operators.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses as L
from .experts import DeblurExpert, DehazeExpert, DenoiseExpert, LowlightExpert
from .nn import GradCheckReport, Param, Tensor, grad_check
from .nn import functional as F
from .residual_analysis import GDFN, MDTA, FrequencyDecomposer, PyramidStage
from .router import Router, route

SIZE = 16
COMPOSITE_FACTOR = 10.0


@dataclass
class SuiteReport:
    tolerance: float
    cases: list[GradCheckReport] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def failing(self) -> list[str]:
        return [c.name for c in self.cases if not c.passed]

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "seconds": self.seconds,
            "failing": self.failing,
            "ops": {c.name: {"max_rel_error": c.max_rel_error, "tolerance": c.tolerance,
                             "passed": c.passed} for c in self.cases},
        }


def _leaf(rng, shape, lo=None, hi=None, scale=1.0) -> Tensor:
    data = rng.uniform(lo, hi, size=shape) if lo is not None else rng.normal(0, scale, size=shape)
    return Tensor(data, requires_grad=True)


def _probe_sum(fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    probe = rng.normal(size=fn().shape)
    return lambda: (fn() * probe).sum()


def _conv(rng, stride, groups, k):
    x = _leaf(rng, (1, SIZE, SIZE, 4))
    w = Param(rng.normal(size=(k, k, 4 // groups, 4)))
    b = Param(rng.normal(size=4))
    return _probe_sum(lambda: F.conv2d(x, w, b, stride, groups), rng), [x, w, b]


def _group_norm(rng):
    x = _leaf(rng, (1, SIZE, SIZE, 4))
    g, b = Param(rng.normal(size=4)), Param(rng.normal(size=4))
    return _probe_sum(lambda: F.group_norm(x, g, b, 2), rng), [x, g, b]


def _linear(rng):
    x = _leaf(rng, (5, 6))
    w, b = Param(rng.normal(size=(6, 3))), Param(rng.normal(size=3))
    return _probe_sum(lambda: F.linear(x, w, b), rng), [x, w, b]


def _unary(fn, lo=-3.0, hi=3.0):
    def build(rng):
        x = _leaf(rng, (1, SIZE, SIZE, 3), lo, hi)
        return _probe_sum(lambda: fn(x), rng), [x]
    return build


def _log_softmax_sum(rng):
    x = _leaf(rng, (6, 4))
    return lambda: F.log_softmax(x, axis=-1)[:, 0].sum() + F.softmax(x, axis=-1)[:, 2].sum(), [x]


def _sort(rng):
    x = Tensor(rng.permutation(24).reshape(6, 4) * 0.1 + rng.uniform(0, 0.01, size=(6, 4)),
               requires_grad=True)
    return _probe_sum(lambda: F.sort_rows(x), rng), [x]


def _module(make, cancelled=()):
    def build(rng):
        mod = make(rng)
        x = _leaf(rng, (1, SIZE, SIZE, 4), scale=0.3)
        # biases feeding a per-channel GroupNorm are cancelled exactly and
        # carry a structurally zero gradient
        params = [p for n, p in mod.named_parameters() if n not in cancelled]
        return _probe_sum(lambda: mod(x), rng), [x] + params
    return build


def _fadd(rng):
    fadd = FrequencyDecomposer(8, rng)
    x = _leaf(rng, (1, SIZE, SIZE, 8), scale=0.3)
    return _probe_sum(lambda: fadd.decompose(x).f_concat, rng), [x] + list(fadd.parameters())


def _posterior(rng):
    fadd = FrequencyDecomposer(8, rng)
    x = _leaf(rng, (2, SIZE, SIZE, 8), scale=0.3)
    return (lambda: F.log_softmax(fadd.posterior(x).logits, axis=-1)[:, 1].sum(),
            [x, fadd.head.weight, fadd.head.bias])


def _router(rng):
    r = Router(8, 8, rng)
    for p in (r.visual.weight, r.visual.bias, r.freq.weight, r.freq.bias):
        p.data[...] = rng.normal(0, 0.5, size=p.shape)
    X, f = _leaf(rng, (2, 8, 8, 8)), _leaf(rng, (2, 8, 8, 8))
    pi = rng.dirichlet(np.ones(4), size=2)
    probe = rng.normal(size=(2, 2))

    def fn():
        return (route(r.features(X, f, pi).logits, 0.8, 2).top_weights * probe).sum()
    return fn, [X, f, r.W_deg, r.visual.weight, r.freq.weight]


def _expert(cls):
    def build(rng):
        ex = cls(3, 6, 4, 2, rng)
        up = ex.trunk.film.up.weight
        up.data[...] = rng.normal(0, 0.1, size=up.shape)
        x = _leaf(rng, (1, SIZE, SIZE, 3), 0.3, 0.7)
        cond = _leaf(rng, (1, SIZE, SIZE, 4), scale=0.5)
        return _probe_sum(lambda: ex(x, cond)[0], rng), [x, cond] + list(ex.parameters())
    return build


def _pixel(rng):
    x = _leaf(rng, (2, SIZE, SIZE, 3), 0.2, 0.8)
    y = rng.uniform(size=(2, SIZE, SIZE, 3))
    return lambda: L.pixel_loss(x, y, ["haze", "blur"]).total, [x]


def _daot(rng):
    x = _leaf(rng, (2, SIZE, SIZE, 3), 0.2, 0.8)
    r = _leaf(rng, (2, SIZE, SIZE, 3), scale=0.1)
    pi = Tensor(rng.dirichlet(np.ones(4), size=2), requires_grad=True)
    y = rng.uniform(size=(2, SIZE, SIZE, 3))
    return lambda: L.daot_loss(x, y, r, pi, 0.5)[0], [x, r, pi]


def _balance(rng):
    m = Tensor(rng.dirichlet(np.ones(4)), requires_grad=True)
    return lambda: L.balance_loss(m), [m]


def _contrastive(rng):
    z = _leaf(rng, (5, 4))
    return lambda: L.contrastive_loss(F.l2_normalize(z, axis=-1), [0, 1, 0, 1, 2], 0.3), [z]


def _stage1(rng):
    from .pipeline import ModelConfig, PhyDAE
    s1 = PhyDAE(ModelConfig.desk(), seed=1).stage1
    s1.tail.weight.data[...] = rng.normal(0, 0.005, size=s1.tail.weight.shape)
    y = _leaf(rng, (1, SIZE, SIZE, 3), 0.2, 0.8)
    return _probe_sum(lambda: s1(y), rng), [y] + list(s1.parameters())


def _composite(rng):
    from .pipeline import ModelConfig, PhyDAE
    model = PhyDAE(ModelConfig.desk(detach_stage1=False), seed=5)
    s2 = model.stage2
    for conv in (model.stage1.tail, s2.tail):
        conv.weight.data[...] = rng.normal(0, 0.002, size=conv.weight.shape)
    y = _leaf(rng, (2, SIZE, SIZE, 3), 0.2, 0.8)
    picks = [y, model.stage1.head.weight, s2.rmp.encoder.weight, s2.fadd.head.weight,
             s2.router.W_deg, s2.dec[0].film.down.weight, s2.experts.experts[0].t_head.weight,
             s2.tail.weight]
    return _probe_sum(lambda: model.forward(y, k=2).restored, rng), picks


# name -> (builder, coordinates probed per tensor, composite?)
CASES: dict[str, tuple[Callable, int, bool]] = {
    "conv2d": (lambda rng: _conv(rng, 1, 1, 3), 16, False),
    "conv2d_strided": (lambda rng: _conv(rng, 2, 1, 3), 16, False),
    "conv2d_grouped": (lambda rng: _conv(rng, 1, 2, 5), 16, False),
    "conv2d_depthwise": (lambda rng: _conv(rng, 1, 4, 3), 16, False),
    "conv2d_1x1": (lambda rng: _conv(rng, 1, 1, 1), 16, False),
    "group_norm": (_group_norm, 16, False),
    "linear": (_linear, 16, False),
    "gelu": (_unary(F.gelu), 16, False),
    "softmax": (_log_softmax_sum, 16, False),
    "adaptive_pool": (_unary(lambda x: F.adaptive_avg_pool2d(x, (4, 4))), 16, False),
    "upsample": (_unary(F.upsample2x), 16, False),
    "fft_magnitude": (_unary(F.fft_magnitude), 16, False),
    "sort_rows": (_sort, 16, False),
    "mdta": (_module(lambda rng: MDTA(4, rng), ("pw_in.bias", "dw.bias", "pw_out.bias")), 6, False),
    "gdfn": (_module(lambda rng: GDFN(4, rng)), 6, False),
    "pyramid_stage": (_module(lambda rng: PyramidStage(4, rng),
                              ("stem.bias", "mdta.pw_in.bias", "mdta.dw.bias", "mdta.pw_out.bias")),
                      4, False),
    "fadd": (_fadd, 6, False),
    "posterior": (_posterior, 8, False),
    "router": (_router, 8, False),
    "expert_dehaze": (_expert(DehazeExpert), 4, False),
    "expert_denoise": (_expert(DenoiseExpert), 4, False),
    "expert_lowlight": (_expert(LowlightExpert), 4, False),
    "expert_deblur": (_expert(DeblurExpert), 4, False),
    "pixel_loss": (_pixel, 16, False),
    "daot_loss": (_daot, 12, False),
    "balance_loss": (_balance, 4, False),
    "contrastive_loss": (_contrastive, 20, False),
    "stage1": (_stage1, 3, False),
    "composite": (_composite, 3, True),
}


def run_suite(tolerance: float = 1e-4, seed: int = 0, only: list[str] | None = None,
              on_case: Callable[[GradCheckReport], None] | None = None) -> SuiteReport:
    """Run every case (or the named subset). The composite case is checked at
    ``COMPOSITE_FACTOR * tolerance``."""
    names = list(CASES) if only is None else list(only)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck cases: {unknown}")
    report = SuiteReport(tolerance)
    t0 = time.perf_counter()
    for i, name in enumerate(names):
        build, coords, composite = CASES[name]
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        fn, tensors = build(rng)
        tol = tolerance * COMPOSITE_FACTOR if composite else tolerance
        rep = grad_check(fn, tensors, tolerance=tol, max_coords=coords, seed=seed, name=name)
        report.cases.append(rep)
        if on_case is not None:
            on_case(rep)
    report.seconds = time.perf_counter() - t0
    return report
