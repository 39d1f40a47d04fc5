"""Residual manifold projector (RMP) and frequency-aware degradation decomposer (FADD).

The RMP turns the stage-1 transport residual ``r0 = y - x0`` into a feature
pyramid R1 (full resolution), R2 (1/2) and R3 (1/4), then projects it onto one
embedding per decoder level. The FADD splits features into four kernel-size
branches and estimates a posterior over the degradation classes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import CLASS_ORDER
from .nn import Conv2d, GroupNorm, Linear, Module, Tensor, as_tensor, concat, norm_groups
from .nn import functional as F

FADD_KERNELS = (7, 5, 3, 1)
POSTERIOR_POOL = (4, 4)
# gain of the Laplacian filters seeded into half of the residual encoder
HIGHPASS_GAIN = 3.0
LAPLACIAN = np.array([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]])


def highpass_init(weight: np.ndarray, count: int, gain: float = HIGHPASS_GAIN) -> None:
    """Overwrite the first ``count`` output filters of a 3x3 conv weight
    (kh, kw, cin, cout) with per-input-channel Laplacians, cycling channels.

    Noise leaves most of its energy above the band that blur removes, so
    residual features that start out high-pass let the posterior separate
    the two within a short training budget.
    """
    cin = weight.shape[2]
    for j in range(count):
        weight[:, :, :, j] = 0.0
        weight[:, :, j % cin, j] = gain * LAPLACIAN


# ----------------------------------------------------------------------
# shared conv-attention blocks
# ----------------------------------------------------------------------
class MDTA(Module):
    """Conv1x1 -> depthwise Conv3x3 -> Conv1x1 -> GroupNorm."""

    def __init__(self, dim: int, rng: np.random.Generator, groups: int = 1):
        self.pw_in = Conv2d(dim, dim, 1, rng, groups=groups)
        self.dw = Conv2d(dim, dim, 3, rng, groups=dim)
        self.pw_out = Conv2d(dim, dim, 1, rng, groups=groups)
        self.norm = GroupNorm(dim, norm_groups(dim))

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.pw_out(self.dw(self.pw_in(x))))


class GDFN(Module):
    """Gated feed-forward: Conv1x1 -> depthwise Conv3x3 -> GELU, multiplied by
    a parallel Conv1x1 gate, then Conv1x1 back to ``dim``."""

    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 2):
        hidden = dim * expansion
        self.pw_in = Conv2d(dim, hidden, 1, rng)
        self.dw = Conv2d(hidden, hidden, 3, rng, groups=hidden)
        self.gate = Conv2d(dim, hidden, 1, rng)
        self.pw_out = Conv2d(hidden, dim, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        a = F.gelu(self.dw(self.pw_in(x)))
        return self.pw_out(a * self.gate(x))


class PyramidStage(Module):
    """One cascade stage: Conv1x1 -> MDTA -> GDFN."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.stem = Conv2d(dim, dim, 1, rng)
        self.mdta = MDTA(dim, rng)
        self.gdfn = GDFN(dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.gdfn(self.mdta(self.stem(x)))


# ----------------------------------------------------------------------
# RMP
# ----------------------------------------------------------------------
@dataclass
class ResidualEmbedding:
    levels: list
    source_scales: list

    def __post_init__(self):
        if len(self.levels) != len(self.source_scales):
            raise ValueError("levels and source_scales differ in length")

    @property
    def dims(self) -> list[int]:
        return [lvl.shape[-1] for lvl in self.levels]

    def level(self, i: int) -> Tensor:
        return self.levels[i]

    def take(self, rows) -> "ResidualEmbedding":
        return ResidualEmbedding([F.take_rows(lvl, rows) for lvl in self.levels], list(self.source_scales))

    def zeros_like(self) -> "ResidualEmbedding":
        return ResidualEmbedding([Tensor(np.zeros(lvl.shape)) for lvl in self.levels],
                                 list(self.source_scales))


class ResidualManifoldProjector(Module):
    def __init__(self, dim: int, decoder_dims, rng: np.random.Generator, in_channels: int = 3):
        decoder_dims = list(decoder_dims)
        if not decoder_dims:
            raise ValueError("decoder_dims must be nonempty")
        self.dim = dim
        self.decoder_dims = decoder_dims
        self.encoder = Conv2d(in_channels, dim, 3, rng)
        highpass_init(self.encoder.weight.data, dim // 2)
        self.stage1 = PyramidStage(dim, rng)
        self.stage2 = PyramidStage(dim, rng)
        self.down2 = Conv2d(dim, dim, 3, rng, stride=2)
        self.stage3 = PyramidStage(dim, rng)
        self.down3 = Conv2d(dim, dim, 3, rng, stride=2)
        self.proj = [Conv2d(dim, c, 1, rng) for c in decoder_dims]

    def encode(self, residual) -> Tensor:
        r = as_tensor(residual)
        if not np.isfinite(r.data).all():
            raise ValueError("residual contains non-finite values")
        return self.encoder(r)

    def pyramid(self, r0: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h, w = r0.shape[1:3]
        if min(h, w) < 4:
            raise ValueError(f"input {h}x{w} too small to downsample twice")
        r1 = self.stage1(r0)
        r2 = self.down2(self.stage2(r0))
        r3 = self.down3(self.stage3(r2))
        return r1, r2, r3

    def project(self, pyramid) -> ResidualEmbedding:
        levels, sources = [], []
        for i, conv in enumerate(self.proj):
            levels.append(conv(pyramid[i % 3]))
            sources.append(i % 3 + 1)
        return ResidualEmbedding(levels, sources)

    def forward(self, residual) -> tuple[ResidualEmbedding, tuple[Tensor, Tensor, Tensor], Tensor]:
        r0 = self.encode(residual)
        pyr = self.pyramid(r0)
        return self.project(pyr), pyr, r0


# ----------------------------------------------------------------------
# FADD
# ----------------------------------------------------------------------
@dataclass
class FrequencyFeature:
    f_low: Tensor
    f_mid: Tensor
    f_high: Tensor
    f_edge: Tensor
    f_concat: Tensor

    @property
    def split(self) -> tuple[int, int, int, int]:
        return tuple(f.shape[-1] for f in (self.f_low, self.f_mid, self.f_high, self.f_edge))


@dataclass
class DegradationPosterior:
    """Batched posterior; ``probs`` rows lie on the simplex in CLASS_ORDER."""
    probs: Tensor
    logits: Tensor

    @property
    def pi(self) -> np.ndarray:
        return self.probs.data

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs.data, axis=-1)

    def log_probs(self) -> Tensor:
        return F.log_softmax(self.logits, axis=-1)


class FrequencyDecomposer(Module):
    """Grouped 1x1 pre-projection into four equal channel quarters, each
    filtered by a depthwise branch of kernel 7, 5, 3 or 1."""

    def __init__(self, dim: int, rng: np.random.Generator, n_classes: int = len(CLASS_ORDER)):
        if dim % 4:
            raise ValueError("FADD channel count must be divisible by 4")
        self.dim = dim
        self.branch = dim // 4
        self.pre = Conv2d(dim, dim, 1, rng, groups=4)
        self.branches = [Conv2d(self.branch, self.branch, k, rng, groups=self.branch) for k in FADD_KERNELS]
        ph, pw = POSTERIOR_POOL
        self.head = Linear(2 * dim * ph * pw, n_classes, rng)

    def decompose(self, x: Tensor) -> FrequencyFeature:
        h, w = x.shape[1:3]
        if min(h, w) < max(FADD_KERNELS):
            raise ValueError(f"input {h}x{w} smaller than the {max(FADD_KERNELS)}x{max(FADD_KERNELS)} kernel")
        z = self.pre(x)
        b = self.branch
        outs = [conv(z[:, :, :, i * b:(i + 1) * b]) for i, conv in enumerate(self.branches)]
        return FrequencyFeature(*outs, f_concat=concat(outs, axis=-1))

    def posterior(self, r1: Tensor) -> DegradationPosterior:
        """Softmax over a linear head on pooled first and second moments.

        Noise and blur residuals are both zero-mean; the pooled energy is
        what tells them apart.
        """
        moments = concat([r1, r1 * r1], axis=-1)
        pooled = F.adaptive_avg_pool2d(moments, POSTERIOR_POOL)
        logits = self.head(pooled.reshape(r1.shape[0], -1))
        return DegradationPosterior(F.softmax(logits, axis=-1), logits)
