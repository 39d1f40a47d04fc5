"""Two-stage cascade: a U-shaped coarse restorer followed by the
residual-guided, expert-routed refinement network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..experts import ExpertBank, FiLM
from ..nn import Conv2d, GroupNorm, Module, Tensor, as_tensor, concat, norm_groups
from ..nn import functional as F
from ..residual_analysis import (GDFN, MDTA, DegradationPosterior, FrequencyDecomposer,
                                 FrequencyFeature, ResidualEmbedding, ResidualManifoldProjector)
from ..router import Router, RoutingDecision, RoutingFeatures, moe_forward, route
from .config import ModelConfig


class ResBlock(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(dim, dim, 3, rng)
        self.conv2 = Conv2d(dim, dim, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.gelu(self.conv1(x)))


class Stage1(Module):
    """Three-level encoder-decoder with widths (d, 2d, 4d) predicting a
    correction added to the input."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, c, nb = cfg.embed_dim, cfg.channels, cfg.stage1_blocks
        dims = (d, 2 * d, 4 * d)
        self.head = Conv2d(c, d, 3, rng)
        self.enc = [[ResBlock(w, rng) for _ in range(nb)] for w in dims]
        self.down = [Conv2d(dims[i], dims[i + 1], 3, rng, stride=2) for i in range(2)]
        self.merge = [Conv2d(dims[i + 1] + dims[i], dims[i], 1, rng) for i in range(2)]
        self.dec = [[ResBlock(w, rng) for _ in range(nb)] for w in dims[:2]]
        self.tail = Conv2d(d, c, 3, rng, zero_init=True)

    def forward(self, y) -> Tensor:
        y = as_tensor(y)
        h = self.head(y)
        skips = []
        for lvl in range(3):
            for b in self.enc[lvl]:
                h = b(h)
            if lvl < 2:
                skips.append(h)
                h = self.down[lvl](h)
        for lvl in (1, 0):
            skip = skips[lvl]
            h = F.upsample2x(h, skip.shape[1:3])
            h = self.merge[lvl](concat([h, skip], axis=-1))
            for b in self.dec[lvl]:
                h = b(h)
        return F.snap(F.clip(y + self.tail(h), 0.0, 1.0))


class AttnBlock(Module):
    """x + MDTA(x), then x + GDFN(GroupNorm(x)). MDTA ends in a norm already;
    the gated FFN is quadratic in its input and needs the pre-norm to keep
    stacked blocks from blowing up."""

    def __init__(self, dim: int, rng: np.random.Generator, groups: int = 1, expansion: int = 2):
        self.attn = MDTA(dim, rng, groups=groups)
        self.norm = GroupNorm(dim, norm_groups(dim))
        self.ffn = GDFN(dim, rng, expansion)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(x)
        return x + self.ffn(self.norm(x))


class DecoderLevel(Module):
    def __init__(self, dim: int, coarse_dim: int, cond_dim: int, n_blocks: int, rank: int,
                 rng: np.random.Generator, expansion: int):
        self.merge = Conv2d(coarse_dim + dim, dim, 1, rng)
        self.film = FiLM(cond_dim, dim, rank, rng)
        self.blocks = [AttnBlock(dim, rng, 1, expansion) for _ in range(n_blocks)]

    def forward(self, coarse: Tensor, skip: Tensor, cond: Tensor) -> Tensor:
        h = F.upsample2x(coarse, skip.shape[1:3])
        h = self.film(self.merge(concat([h, skip], axis=-1)), cond)
        for b in self.blocks:
            h = b(h)
        return h


class Stage2(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, c = cfg.embed_dim, cfg.channels
        dims = cfg.level_dims
        self.cfg = cfg
        self.rmp = ResidualManifoldProjector(d, cfg.decoder_dims, rng, in_channels=c)
        self.fadd = FrequencyDecomposer(d, rng)
        self.head = Conv2d(2 * c, d, 3, rng)
        self.enc = [AttnBlock(dims[lvl], rng, cfg.heads[lvl], cfg.ffn_expansion)
                    for lvl in range(4) for _ in range(cfg.encoder_groups[lvl])]
        self._enc_counts = cfg.encoder_groups
        self.down = [Conv2d(dims[i], dims[i + 1], 3, rng, stride=2) for i in range(3)]
        self.dec = [DecoderLevel(dims[i], dims[i + 1], cfg.decoder_dims[i], cfg.decoder_blocks[i],
                                 cfg.adapter_rank, rng, cfg.ffn_expansion) for i in range(3)]
        self.router = Router(d, d, rng, n_experts=cfg.n_experts, alpha=cfg.alpha,
                             prior_scale=cfg.prior_scale)
        self.experts = ExpertBank(c, cfg.expert_hidden, cfg.decoder_dims[0], cfg.adapter_rank, rng)
        self.tail = Conv2d(d, c, 3, rng, zero_init=True)

    def _encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        h = self.head(x)
        skips, i = [], 0
        for lvl in range(4):
            for _ in range(self._enc_counts[lvl]):
                h = self.enc[i](h)
                i += 1
            if lvl < 3:
                skips.append(h)
                h = self.down[lvl](h)
        return h, skips

    def forward(self, y: Tensor, coarse: Tensor, k: int, tau: float,
                posterior_override=None) -> "ForwardResult":
        residual = y - coarse
        if self.cfg.detach_stage1:
            coarse_in, residual_in = coarse.detach(), residual.detach()
        else:
            coarse_in, residual_in = coarse, residual
        E, pyramid, r0 = self.rmp(residual_in)
        freq = self.fadd.decompose(r0)
        post = self.fadd.posterior(pyramid[0])
        h, skips = self._encode(concat([y, coarse_in], axis=-1))
        for lvl in (2, 1, 0):
            h = self.dec[lvl](h, skips[lvl], E.levels[lvl])
        pi = post if posterior_override is None else posterior_override
        feats = self.router.features(h, freq, pi)
        decision = route(feats.logits, tau, k)
        mixed = moe_forward(y, E, decision, self.experts)
        restored = F.clip(mixed + self.tail(h), 0.0, 1.0)
        return ForwardResult(restored, coarse, residual, E, pyramid, r0, freq, post, feats, decision)


@dataclass
class ForwardResult:
    restored: Tensor
    coarse: Tensor
    residual: Tensor
    embedding: ResidualEmbedding
    pyramid: tuple
    r0: Tensor
    freq: FrequencyFeature
    posterior: DegradationPosterior
    features: RoutingFeatures
    decision: RoutingDecision


class PhyDAE(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.stage1 = Stage1(cfg, rng)
        self.stage2 = Stage2(cfg, rng)

    def forward(self, y, k: int | None = None, tau: float | None = None,
                posterior_override=None) -> ForwardResult:
        y = as_tensor(y)
        if y.ndim == 3:
            y = y.reshape((1,) + y.shape)
        # on the dyadic grid y - coarse and coarse + residual are exact
        y = F.snap(y)
        coarse = self.stage1(y)
        k = self.cfg.k_infer if k is None else k
        tau = self.cfg.tau if tau is None else tau
        return self.stage2(y, coarse, k, tau, posterior_override)

    def restore(self, y, k: int | None = None, tau: float | None = None) -> np.ndarray:
        from ..nn import no_grad
        with no_grad():
            return self.forward(y, k, tau).restored.data
