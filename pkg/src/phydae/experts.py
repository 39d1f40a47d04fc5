"""Physics-aware restoration experts.

Each expert shares a small conditioned trunk (conv, residual-embedding
modulation, GELU, conv) and ends in a physical operator: scattering-model
inversion, tiered Gaussian denoising, Retinex gamma correction, or directional
unsharp masking. Every expert also exposes its operator with injected
parameters ("oracle mode"), bypassing the network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import CLASS_ORDER
from .nn import Conv2d, Linear, Module, Param, Tensor, as_tensor, concat, stack
from .nn import functional as F

DIV_EPS = 1e-6
ILLUM_FLOOR = 1e-3
GAMMA_FLOOR = 0.1
FUSION_EPS = 1e-8
NOISE_TIERS = ((0.03, 0.02), (0.08, 0.03), (0.15, 0.05))
NOISE_FILTER_SIGMAS = (0.5, 1.0, 2.0)
BRIGHT_FRACTION = 0.1
A_LOCAL_WINDOW = 15


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def gaussian_kernel_1d(sigma: float, size: int | None = None) -> np.ndarray:
    if size is None:
        size = 2 * int(math.ceil(3.0 * sigma)) + 1
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def gaussian_kernel_2d(sigma: float, size: int | None = None) -> np.ndarray:
    k = gaussian_kernel_1d(sigma, size)
    return np.outer(k, k)


# ----------------------------------------------------------------------
# conditioning
# ----------------------------------------------------------------------
class FiLM(Module):
    """Per-pixel scale and shift from a bias-free low-rank 1x1 map of the
    embedding. The up-projection starts at zero, and a zero embedding always
    gives the identity."""

    def __init__(self, cond_dim: int, channels: int, rank: int, rng: np.random.Generator):
        self.channels = channels
        self.down = Conv2d(cond_dim, rank, 1, rng, bias=False)
        self.up = Conv2d(rank, 2 * channels, 1, rng, bias=False, zero_init=True)

    def forward(self, h: Tensor, cond: Tensor | None) -> Tensor:
        if cond is None:
            return h
        ss = self.up(self.down(cond))
        c = self.channels
        return h * (ss[:, :, :, :c] + 1.0) + ss[:, :, :, c:]


class Trunk(Module):
    def __init__(self, channels: int, hidden: int, cond_dim: int, rank: int, rng: np.random.Generator):
        self.conv_in = Conv2d(channels, hidden, 3, rng)
        self.film = FiLM(cond_dim, hidden, rank, rng)
        self.conv_mid = Conv2d(hidden, hidden, 3, rng)

    def forward(self, x: Tensor, cond: Tensor | None) -> Tensor:
        h = F.gelu(self.film(self.conv_in(x), cond))
        return F.gelu(self.conv_mid(h))


def _check_cond(x: Tensor, cond: Tensor | None) -> None:
    if cond is not None and cond.shape[:3] != x.shape[:3]:
        raise ValueError(f"conditioning extent {cond.shape[:3]} does not match input {x.shape[:3]}")


# ----------------------------------------------------------------------
# dehazing
# ----------------------------------------------------------------------
@dataclass
class HazeParams:
    t_rgb: Tensor
    t: Tensor
    A: Tensor
    A_global: Tensor
    A_local: Tensor
    w_mix: Tensor
    s_rgb: Tensor


def invert_scattering(hazy, t, A, eps: float = DIV_EPS) -> Tensor:
    """J = (I - A (1 - t)) / (t + eps), clamped to [0, 1]."""
    hazy, t, A = as_tensor(hazy), as_tensor(t), as_tensor(A)
    return F.clip((hazy - A * (1.0 - t)) / (t + eps), 0.0, 1.0)


class DehazeExpert(Module):
    def __init__(self, channels: int, hidden: int, cond_dim: int, rank: int, rng: np.random.Generator):
        self.trunk = Trunk(channels, hidden, cond_dim, rank, rng)
        self.t_head = Conv2d(hidden, channels, 1, rng)
        self.t_head.bias.data[:] = 3.0  # start near t ~ 0.9: mild correction
        self.s_raw = Param(np.full(channels, 3.0), "s_raw")  # s ~ 0.95
        self.refine = Conv2d(channels, channels, 3, rng, zero_init=True)
        self.mix_head = Linear(hidden, 1, rng)

    def estimate(self, x: Tensor, cond: Tensor | None) -> HazeParams:
        h = self.trunk(x, cond)
        s = F.sigmoid(self.s_raw)
        t_rgb = F.sigmoid(self.t_head(h)) * s
        logit = F.log(t_rgb) - F.log(1.0 - t_rgb)
        t = F.sigmoid(logit + self.refine(t_rgb))
        n, hh, ww, c = x.shape
        m = max(1, int(math.ceil(BRIGHT_FRACTION * hh * ww)))
        a_global = F.topk_mean(x.reshape(n, hh * ww, c), m, axis=1).reshape(n, 1, 1, c)
        box = np.full((A_LOCAL_WINDOW, A_LOCAL_WINDOW), 1.0 / A_LOCAL_WINDOW ** 2)
        a_local = F.depthwise_filter(x, box, padding="zeros" if min(hh, ww) <= A_LOCAL_WINDOW // 2 else "reflect")
        w_mix = F.sigmoid(self.mix_head(F.global_avg_pool(h))).reshape(n, 1, 1, 1)
        A = a_global * w_mix + a_local * (1.0 - w_mix)
        return HazeParams(t_rgb, t, A, a_global, a_local, w_mix, s)

    def forward(self, x, cond=None) -> tuple[Tensor, HazeParams]:
        x = as_tensor(x)
        _check_cond(x, cond)
        p = self.estimate(x, cond)
        return invert_scattering(x, p.t, p.A), p

    @staticmethod
    def oracle(x, t, A) -> Tensor:
        return invert_scattering(x, t, A)


# ----------------------------------------------------------------------
# denoising
# ----------------------------------------------------------------------
@dataclass
class NoiseTierParams:
    sigma_map: Tensor
    weights: list
    filtered: list
    tiers: tuple = NOISE_TIERS


def tier_weight(sigma_hat, mu: float, width: float) -> Tensor:
    d = as_tensor(sigma_hat) - mu
    return F.exp(d * d * (-0.5 / (width * width)))


def fuse_tiers(filtered, weights, eps: float = FUSION_EPS) -> Tensor:
    num = filtered[0] * weights[0]
    den = weights[0]
    for f, w in zip(filtered[1:], weights[1:]):
        num = num + f * w
        den = den + w
    return num / (den + eps)


class DenoiseExpert(Module):
    def __init__(self, channels: int, hidden: int, cond_dim: int, rank: int, rng: np.random.Generator):
        self.trunk = Trunk(channels, hidden, cond_dim, rank, rng)
        self.sigma_head = Conv2d(2 * hidden, 1, 1, rng)
        self.sigma_head.bias.data[:] = _inv_softplus(0.08)
        self.corrections = [Conv2d(hidden, channels, 1, rng, zero_init=True) for _ in NOISE_TIERS]
        self.kernels = [gaussian_kernel_2d(s) for s in NOISE_FILTER_SIGMAS]

    def _multiscale(self, h: Tensor) -> Tensor:
        hh, ww = h.shape[1:3]
        if hh % 2 or ww % 2:
            coarse = F.upsample2x(F.adaptive_avg_pool2d(h, ((hh + 1) // 2, (ww + 1) // 2)), (hh, ww))
        else:
            coarse = F.upsample2x(F.avg_pool(h, 2), (hh, ww))
        return concat([h, coarse], axis=-1)

    def forward(self, x, cond=None) -> tuple[Tensor, NoiseTierParams]:
        x = as_tensor(x)
        _check_cond(x, cond)
        h = self.trunk(x, cond)
        sigma_map = F.softplus(self.sigma_head(self._multiscale(h)))
        weights = [tier_weight(sigma_map, mu, sd) for mu, sd in NOISE_TIERS]
        pad = "reflect" if min(x.shape[1:3]) > 6 else "zeros"
        filtered = [F.depthwise_filter(x, k, padding=pad) + corr(h) for k, corr in zip(self.kernels, self.corrections)]
        out = F.clip(fuse_tiers(filtered, weights), 0.0, 1.0)
        return out, NoiseTierParams(sigma_map, weights, filtered)


# ----------------------------------------------------------------------
# low light
# ----------------------------------------------------------------------
@dataclass
class RetinexParams:
    L: Tensor
    gamma_map: Tensor


def retinex_correct(x, L, gamma_map, eps: float = DIV_EPS) -> Tensor:
    """(I / (L + eps)) ** (1 / gamma), clamped to [0, 1]."""
    x = as_tensor(x)
    base = F.maximum(x / (as_tensor(L) + eps), 1e-12)
    return F.clip(F.exp(F.log(base) / gamma_map), 0.0, 1.0)


class LowlightExpert(Module):
    def __init__(self, channels: int, hidden: int, cond_dim: int, rank: int, rng: np.random.Generator):
        self.trunk = Trunk(channels, hidden, cond_dim, rank, rng)
        self.local_head = Conv2d(hidden, 1, 1, rng)
        self.local_head.bias.data[:] = 4.0  # L ~ 0.98 at start
        self.global_head = Linear(hidden, 1, rng, zero_init=True)
        self.gamma_head = Conv2d(hidden, 1, 1, rng)
        self.gamma_head.bias.data[:] = _inv_softplus(1.0 - GAMMA_FLOOR)  # gamma ~ 1

    def estimate(self, x: Tensor, cond: Tensor | None) -> RetinexParams:
        h = self.trunk(x, cond)
        n = x.shape[0]
        z = self.local_head(h) + self.global_head(F.global_avg_pool(h)).reshape(n, 1, 1, 1)
        L = F.sigmoid(z) * (1.0 - ILLUM_FLOOR) + ILLUM_FLOOR
        gamma = F.softplus(self.gamma_head(h)) + GAMMA_FLOOR
        return RetinexParams(L, gamma)

    def forward(self, x, cond=None) -> tuple[Tensor, RetinexParams]:
        x = as_tensor(x)
        _check_cond(x, cond)
        p = self.estimate(x, cond)
        return retinex_correct(x, p.L, p.gamma_map), p

    @staticmethod
    def oracle(x, L, gamma) -> Tensor:
        return retinex_correct(x, L, gamma)


# ----------------------------------------------------------------------
# deblurring
# ----------------------------------------------------------------------
@dataclass
class BlurParams:
    kappa: Tensor
    sigma_x: Tensor
    sigma_y: Tensor
    theta: Tensor
    a: Tensor
    w_dir: Tensor


def direction_weights(a, theta) -> Tensor:
    """Softmax over [1 - a, a (1 + cos(theta pi)), a (1 + sin(theta pi))]; theta in [0, 1)."""
    a, theta = as_tensor(a), as_tensor(theta)
    ang = theta * math.pi
    logits = stack([1.0 - a, a * (F.cos(ang) + 1.0), a * (F.sin(ang) + 1.0)], axis=-1)
    return F.softmax(logits, axis=-1)


_G5 = gaussian_kernel_1d(1.0, 5)
UNSHARP_KERNELS = (np.outer(_G5, _G5), _G5[None, :], _G5[:, None])


def directional_sharpen(x, kappa, w_dir) -> Tensor:
    """x + kappa * sum_j w_j (x - G_j x) over isotropic / horizontal / vertical Gaussians."""
    x = as_tensor(x)
    n = x.shape[0]
    w_dir = as_tensor(w_dir)
    pad = "reflect" if min(x.shape[1:3]) > 2 else "zeros"
    detail = None
    for j, k in enumerate(UNSHARP_KERNELS):
        u = (x - F.depthwise_filter(x, k, padding=pad)) * w_dir[:, j].reshape(n, 1, 1, 1)
        detail = u if detail is None else detail + u
    return F.clip(x + detail * as_tensor(kappa).reshape(n, 1, 1, 1), 0.0, 1.0)


class DeblurExpert(Module):
    def __init__(self, channels: int, hidden: int, cond_dim: int, rank: int, rng: np.random.Generator):
        self.trunk = Trunk(channels, hidden, cond_dim, rank, rng)
        self.param_head = Linear(hidden, 4, rng)
        self.param_head.bias.data[:] = [_inv_softplus(0.5), 0.0, 0.0, 0.0]

    def estimate(self, x: Tensor, cond: Tensor | None) -> BlurParams:
        p = self.param_head(F.global_avg_pool(self.trunk(x, cond)))
        kappa = F.softplus(p[:, 0])
        sx = F.softplus(p[:, 1]) + 0.3
        sy = F.softplus(p[:, 2]) + 0.3
        theta = F.sigmoid(p[:, 3])
        a = F.abs(sx - sy)
        return BlurParams(kappa, sx, sy, theta, a, direction_weights(a, theta))

    def forward(self, x, cond=None) -> tuple[Tensor, BlurParams]:
        x = as_tensor(x)
        _check_cond(x, cond)
        p = self.estimate(x, cond)
        return directional_sharpen(x, p.kappa, p.w_dir), p


# ----------------------------------------------------------------------
# bank and dispatch
# ----------------------------------------------------------------------
EXPERT_TYPES = {"haze": DehazeExpert, "noise": DenoiseExpert, "lowlight": LowlightExpert, "blur": DeblurExpert}


class ExpertBank(Module):
    """The four experts in CLASS_ORDER with per-expert sample counters."""

    def __init__(self, channels: int, hidden: int, cond_dim: int, rank: int, rng: np.random.Generator):
        self.experts = [EXPERT_TYPES[kind](channels, hidden, cond_dim, rank, rng) for kind in CLASS_ORDER]
        self.calls = np.zeros(len(self.experts), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.experts)

    def reset_counts(self) -> None:
        self.calls[:] = 0

    def apply(self, k: int, x, cond=None) -> Tensor:
        if not (isinstance(k, (int, np.integer)) and 0 <= k < len(self.experts)):
            raise KeyError(f"unknown expert id {k!r}")
        x = as_tensor(x)
        self.calls[k] += x.shape[0]
        out, _ = self.experts[k](x, cond)
        return out


def expert_apply(bank: ExpertBank, k: int, x, E) -> Tensor:
    """Dispatch to expert ``k`` conditioned on the full-resolution embedding level."""
    cond = E.levels[0] if hasattr(E, "levels") else E
    return bank.apply(k, x, cond)
