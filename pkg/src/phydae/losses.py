"""Training objective.

total = daot + l1 * pixel + l2 * balance + l3 * contrast, where daot is a
sliced Wasserstein-2 distribution term plus a posterior-weighted spectral
penalty on the transport residual.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import CLASS_ORDER
from .image_core import SSIM_C1, SSIM_C2, SSIM_WINDOW
from .nn import Tensor, as_tensor, stack
from .nn.tensor import transpose
from .nn import functional as F

log = logging.getLogger(__name__)

BALANCE_EPS = 1e-8
W2_PROJECTIONS = 64
W2_POOL = 4

DEFAULT_BETA = {
    "haze": (1.0, 0.1, 0.5),
    "noise": (1.0, 0.05, 0.3),
    "lowlight": (1.0, 0.1, 0.5),
    "blur": (1.0, 0.3, 0.3),
}


class NoPositivePairsError(ValueError):
    """Raised when no anchor in a contrastive batch has a positive."""


# ----------------------------------------------------------------------
# frequency bands
# ----------------------------------------------------------------------
def radial_frequency(h: int, w: int) -> np.ndarray:
    """Normalised radial frequency on the unshifted DFT grid; 1.0 at the
    highest representable frequency along either axis."""
    fy = np.fft.fftfreq(h)[:, None] / 0.5
    fx = np.fft.fftfreq(w)[None, :] / 0.5
    return np.clip(np.sqrt(fy ** 2 + fx ** 2), 0.0, 1.0)


@dataclass(frozen=True)
class PhysicsBandSpec:
    """Radial band [lo, hi) per class (hi == 1 is closed). The blur band can
    be weighted by |cos| of the angle to a dominant direction."""
    bands: dict = field(default_factory=lambda: {
        "haze": (0.0, 0.15), "noise": (0.5, 1.0), "lowlight": (0.0, 0.1), "blur": (0.15, 0.6)})
    directional: tuple = ("blur",)

    def __post_init__(self):
        missing = set(CLASS_ORDER) - set(self.bands)
        if missing:
            raise ValueError(f"bands missing for {sorted(missing)}")
        for kind, (lo, hi) in self.bands.items():
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError(f"band for {kind} must satisfy 0 <= lo < hi <= 1")

    def weight_map(self, kind: str, h: int, w: int, theta: float | None = None) -> np.ndarray:
        rho = radial_frequency(h, w)
        lo, hi = self.bands[kind]
        mask = (rho >= lo) & ((rho < hi) if hi < 1.0 else (rho <= hi))
        wmap = mask.astype(np.float64)
        if kind in self.directional and theta is not None:
            fy = np.fft.fftfreq(h)[:, None]
            fx = np.fft.fftfreq(w)[None, :]
            ang = np.arctan2(fy, fx)
            wmap = wmap * np.abs(np.cos(ang - theta * math.pi))
        if not wmap.any():
            raise ValueError(f"band for {kind} is empty at {h}x{w}")
        return wmap

    @classmethod
    def full(cls) -> "PhysicsBandSpec":
        """Every class weights the whole spectrum by 1 (Parseval check)."""
        return cls(bands={k: (0.0, 1.0) for k in CLASS_ORDER}, directional=())


def band_energies(residual, bands: PhysicsBandSpec) -> Tensor:
    """(N, 4) spectral energy of ``residual`` per class band, divided by H*W*C."""
    r = as_tensor(residual)
    _, h, w, c = r.shape
    per = [F.spectral_energy(r, bands.weight_map(kind, h, w)) for kind in CLASS_ORDER]
    return stack(per, axis=-1) / float(h * w * c)


def physics_freq_reg(residual, pi, bands: PhysicsBandSpec | None = None) -> Tensor:
    """Batch mean of sum_k pi_k * E_k(residual)."""
    bands = bands or PhysicsBandSpec()
    energies = band_energies(residual, bands)
    p = pi.probs if hasattr(pi, "probs") else as_tensor(pi)
    if p.ndim == 1:
        p = p.reshape(1, -1)
    return (energies * p).sum(axis=-1).mean()


# ----------------------------------------------------------------------
# sliced Wasserstein-2
# ----------------------------------------------------------------------
def sliced_wasserstein(a, b, directions) -> Tensor:
    """Mean squared difference of sorted projections, averaged over directions.

    ``a`` and ``b`` are (M, D) point clouds of equal mass; ``directions`` is
    (P, D). With one direction this is the exact squared 1-D W2.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"point clouds differ in shape: {a.shape} vs {b.shape}")
    d = Tensor(np.asarray(directions, dtype=np.float64).T)
    pa = F.sort_rows(a @ d)
    pb = F.sort_rows(b @ d)
    diff = pa - pb
    return (diff * diff).mean()


def random_directions(n: int, dim: int, seed: int = 0) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def w2_distance(pred, target, n_proj: int = W2_PROJECTIONS, pool: int = W2_POOL, seed: int = 0) -> Tensor:
    """Sliced W2 between the batches of pooled per-sample feature vectors."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    if n < 2:
        raise ValueError("w2_distance needs a batch of at least 2 samples")
    pa = F.avg_pool(pred, pool).reshape(n, -1)
    pb = F.avg_pool(target, pool).reshape(n, -1)
    return sliced_wasserstein(pa, pb, random_directions(n_proj, pa.shape[1], seed))


def daot_loss(pred, target, residual, pi, lambda_freq: float = 0.01,
              bands: PhysicsBandSpec | None = None, seed: int = 0) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (daot, w2, freq_reg)."""
    w2 = w2_distance(pred, target, seed=seed)
    reg = physics_freq_reg(residual, pi, bands)
    return w2 + reg * lambda_freq, w2, reg


# ----------------------------------------------------------------------
# pixel loss
# ----------------------------------------------------------------------
def ssim_per_sample(pred, target, window: int = SSIM_WINDOW) -> Tensor:
    """Differentiable mean local SSIM per sample (uniform windows, stride 1)."""
    x, y = as_tensor(pred), as_tensor(target)
    box = np.full((window, window), 1.0 / window ** 2)

    def avg(t):
        return F.depthwise_filter(t, box, padding="valid")

    mx, my = avg(x), avg(y)
    vx = avg(x * x) - mx * mx
    vy = avg(y * y) - my * my
    cov = avg(x * y) - mx * my
    num = (mx * my * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return (num / den).mean(axis=(1, 2, 3))


@dataclass
class PixelTerms:
    total: Tensor
    l1: Tensor
    fft: Tensor
    ssim_term: Tensor


def pixel_loss(pred, target, kinds, beta: dict | None = None) -> PixelTerms:
    """Per-sample beta-weighted L1 + FFT-magnitude L1 + (1 - SSIM), averaged
    over the batch. ``kinds`` is one class name or one per sample."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    beta = beta or DEFAULT_BETA
    n = pred.shape[0]
    kinds = [kinds] * n if isinstance(kinds, str) else list(kinds)
    if len(kinds) != n:
        raise ValueError("need one kind per sample")
    b = np.array([beta[k] for k in kinds], dtype=np.float64)
    l1 = F.abs(pred - target).mean(axis=(1, 2, 3))
    fft = F.abs(F.fft_magnitude(pred) - F.fft_magnitude(target)).mean(axis=(1, 2, 3))
    s_term = 1.0 - ssim_per_sample(pred, target)
    total = (l1 * b[:, 0] + fft * b[:, 1] + s_term * b[:, 2]).mean()
    return PixelTerms(total, l1.mean(), fft.mean(), s_term.mean())


# ----------------------------------------------------------------------
# balance and contrastive
# ----------------------------------------------------------------------
def balance_loss(mean_activation, eps: float = BALANCE_EPS) -> Tensor:
    """Population variance over squared mean: the squared coefficient of variation."""
    m = as_tensor(mean_activation)
    if (m.data < 0).any():
        raise ValueError("activation rates must be nonnegative")
    if not (m.data > 0).any():
        raise ValueError("activation vector is all zero")
    mu = m.mean()
    d = m - mu
    return (d * d).mean() / (mu * mu + eps)


def contrastive_loss(z, labels, tau_c: float = 0.1, on_empty: str = "raise") -> Tensor:
    """Supervised contrastive loss over l2-normalised rows of ``z``.

    Anchors without a positive are skipped. With none left, raises
    NoPositivePairsError, or returns 0 with a warning when ``on_empty="zero"``.
    """
    z = as_tensor(z)
    if not tau_c > 0:
        raise ValueError("tau_c must be positive")
    labels = np.asarray(labels)
    b = z.shape[0]
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(b, dtype=bool)
    pos = same & not_self
    anchors = np.nonzero(pos.any(axis=1))[0]
    if anchors.size == 0:
        if on_empty == "zero":
            log.warning("contrastive batch has no positive pairs; term set to 0")
            return Tensor(np.array(0.0))
        raise NoPositivePairsError("no anchor has a positive in this batch")
    sim = (z @ transpose(z, (1, 0))) / tau_c
    denom = F.logsumexp(sim, axis=1, mask=not_self.astype(np.float64))
    logp = sim - denom.reshape(b, 1)
    pmask = pos.astype(np.float64)
    per_anchor = (logp * pmask).sum(axis=1) / np.maximum(pmask.sum(axis=1), 1.0)
    sel = per_anchor[anchors]
    return -sel.mean()


# ----------------------------------------------------------------------
# total
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = 0.1
    lambda_freq: float = 0.01
    beta: dict = field(default_factory=lambda: dict(DEFAULT_BETA))

    def __post_init__(self):
        vals = [self.lambda1, self.lambda2, self.lambda3, self.lambda_freq]
        vals += [v for row in self.beta.values() for v in row]
        if min(vals) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossReport:
    daot: float
    pixel: float
    balance: float
    contrast: float
    total: float
    breakdown: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"daot": self.daot, "pixel": self.pixel, "balance": self.balance,
             "contrast": self.contrast, "total": self.total}
        d.update(self.breakdown)
        return d


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def combine(daot, pixel, balance, contrast, weights: LossWeights | None = None):
    """Weighted sum on tensors or floats; returns the same kind as the inputs."""
    w = weights or LossWeights()
    return daot + pixel * w.lambda1 + balance * w.lambda2 + contrast * w.lambda3


def total_loss(daot, pixel, balance, contrast, weights: LossWeights | None = None,
               breakdown: dict | None = None) -> LossReport:
    parts = [_scalar(v) for v in (daot, pixel, balance, contrast)]
    if not all(math.isfinite(v) for v in parts):
        raise ValueError(f"non-finite loss part: {parts}")
    total = combine(*parts, weights=weights)
    return LossReport(*parts, total=total, breakdown=dict(breakdown or {}))
