"""Forward degradation synthesis and paired-corpus construction.

Four degradations are modelled: atmospheric haze, additive Gaussian noise,
anisotropic Gaussian blur and power-law low-light darkening. A corpus is one
degraded image per (clean image, kind) pair, split 8:1:1 by a seeded shuffle.
"""
from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import ClassVar, Union

import cv2
import numpy as np

from . import CLASS_ORDER
from .image_core import ImageTensor, load_image, save_image
from .nn import functional as F
from .nn.tensor import Tensor

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


# ----------------------------------------------------------------------
# parameter records
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Haze:
    t: float
    A: tuple[float, ...]
    field_seed: int | None = None
    kind: ClassVar[str] = "haze"

    def __post_init__(self):
        if not 0.0 < self.t <= 1.0:
            raise ValueError(f"transmittance {self.t} outside (0, 1]")
        if any(not 0.0 <= a <= 1.0 for a in self.A):
            raise ValueError(f"atmospheric light {self.A} outside [0, 1]")


@dataclass(frozen=True)
class Noise:
    sigma: float
    seed: int = 0
    kind: ClassVar[str] = "noise"

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 0.5:
            raise ValueError(f"noise sigma {self.sigma} outside [0, 0.5]")


@dataclass(frozen=True)
class Blur:
    sigma_x: float
    sigma_y: float
    theta: float = 0.0
    kernel_size: int = 11
    kappa: float = 1.0
    kind: ClassVar[str] = "blur"

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("blur intensity kappa must be >= 0")
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("blur standard deviations must be > 0")
        if not 0.0 <= self.theta < 1.0:
            raise ValueError(f"theta {self.theta} outside [0, 1)")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size {self.kernel_size} must be odd and >= 3")


@dataclass(frozen=True)
class Lowlight:
    gamma: float
    kind: ClassVar[str] = "lowlight"

    def __post_init__(self):
        if self.gamma <= 1.0:
            raise ValueError(f"low-light gamma {self.gamma} must exceed 1")


DegradationSpec = Union[Haze, Noise, Blur, Lowlight]
_SPEC_TYPES = {cls.kind: cls for cls in (Haze, Noise, Blur, Lowlight)}


def spec_to_dict(spec: DegradationSpec) -> dict:
    d = asdict(spec)
    if "A" in d:
        d["A"] = list(d["A"])
    return d


def spec_from_dict(kind: str, params: dict) -> DegradationSpec:
    cls = _SPEC_TYPES[kind]
    params = dict(params)
    if "A" in params:
        params["A"] = tuple(params["A"])
    return cls(**params)


# ----------------------------------------------------------------------
# synthesis operators
# ----------------------------------------------------------------------
def _arr(img) -> np.ndarray:
    return np.asarray(img.data if isinstance(img, ImageTensor) else img, dtype=np.float64)


def smooth_field(height: int, width: int, seed: int, cells: int = 4) -> np.ndarray:
    """Low-frequency random field in [0, 1]: coarse uniform noise upsampled bilinearly."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells))
    return cv2.resize(coarse, (width, height), interpolation=cv2.INTER_LINEAR)


def haze_transmission(spec: Haze, height: int, width: int, spread: float = 0.15) -> np.ndarray | float:
    """Scalar t, or a smooth field around ``spec.t`` when ``field_seed`` is set."""
    if spec.field_seed is None:
        return spec.t
    f = smooth_field(height, width, spec.field_seed)
    return np.clip(spec.t + spread * (2.0 * f - 1.0), 0.05, 1.0)


def apply_haze(clean, t, A) -> ImageTensor:
    """Atmospheric scattering: I = J * t + A * (1 - t)."""
    J = _arr(clean)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 2:
        t = t[:, :, None]
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("transmittance must lie in [0, 1]")
    A = np.broadcast_to(np.asarray(A, dtype=np.float64), (J.shape[2],))
    if np.any(A < 0.0) or np.any(A > 1.0):
        raise ValueError("atmospheric light must lie in [0, 1]")
    return ImageTensor.clamp(J * t + A * (1.0 - t))


def gaussian_noise(shape, sigma: float, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, sigma, size=shape)


def apply_noise(clean, sigma: float, seed: int) -> ImageTensor:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = _arr(clean)
    if sigma == 0:
        return ImageTensor(x)
    return ImageTensor.clamp(x + gaussian_noise(x.shape, sigma, seed))


def make_blur_kernel(spec: Blur) -> np.ndarray:
    """Normalised anisotropic Gaussian with principal axis at ``theta * pi``.

    ``kappa`` scales both standard deviations; kappa = 0 yields the identity
    (delta) kernel. Columns are the x axis and rows the y axis.
    """
    k = spec.kernel_size
    half = k // 2
    sx, sy = spec.kappa * spec.sigma_x, spec.kappa * spec.sigma_y
    needed = 2 * math.ceil(3.0 * max(sx, sy)) + 1
    if needed > k:
        warnings.warn(f"kernel_size {k} truncates 3-sigma support (needs {needed})", stacklevel=2)
    if sx == 0.0 or sy == 0.0:
        kern = np.zeros((k, k))
        kern[half, half] = 1.0
        return kern
    v, u = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    phi = spec.theta * math.pi
    a = u * math.cos(phi) + v * math.sin(phi)
    b = -u * math.sin(phi) + v * math.cos(phi)
    kern = np.exp(-0.5 * (a * a / (sx * sx) + b * b / (sy * sy)))
    return kern / kern.sum()


def convolve_image(img, kernel: np.ndarray) -> np.ndarray:
    """2-D convolution per channel with reflect-padded borders."""
    x = _arr(img)
    flipped = np.ascontiguousarray(kernel[::-1, ::-1])
    return F.depthwise_filter(Tensor(x[None]), flipped).data[0]


def apply_blur(clean, spec: Blur) -> ImageTensor:
    return ImageTensor.clamp(convolve_image(clean, make_blur_kernel(spec)))


def apply_lowlight(clean, gamma: float) -> ImageTensor:
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    return ImageTensor.clamp(_arr(clean) ** gamma)


def apply_degradation(clean, spec: DegradationSpec) -> ImageTensor:
    x = _arr(clean)
    if isinstance(spec, Haze):
        return apply_haze(x, haze_transmission(spec, x.shape[0], x.shape[1]), spec.A)
    if isinstance(spec, Noise):
        return apply_noise(x, spec.sigma, spec.seed)
    if isinstance(spec, Blur):
        return apply_blur(x, spec)
    if isinstance(spec, Lowlight):
        return apply_lowlight(x, spec.gamma)
    raise TypeError(f"unknown degradation spec {spec!r}")


# ----------------------------------------------------------------------
# corpus construction
# ----------------------------------------------------------------------
@dataclass
class SynthRanges:
    """Sampling ranges for degradation parameters."""

    t: tuple[float, float] = (0.3, 0.9)
    A: tuple[float, float] = (0.7, 1.0)
    sigma: tuple[float, float] = (0.02, 0.15)
    kernel_sizes: tuple[int, ...] = (7, 11, 15)
    blur_sigma: tuple[float, float] = (0.5, 3.0)
    kappa: tuple[float, float] = (1.0, 1.0)
    gamma: tuple[float, float] = (1.5, 3.5)
    haze_field: bool = False

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def sample_spec(kind: str, rng: np.random.Generator, ranges: SynthRanges) -> DegradationSpec:
    def u(lo_hi):
        return float(rng.uniform(*lo_hi))

    if kind == "haze":
        t = u(ranges.t)
        A = tuple(float(a) for a in rng.uniform(*ranges.A, size=3))
        field_seed = int(rng.integers(2**31)) if ranges.haze_field else None
        return Haze(t=t, A=A, field_seed=field_seed)
    if kind == "noise":
        return Noise(sigma=u(ranges.sigma), seed=int(rng.integers(2**31)))
    if kind == "blur":
        return Blur(sigma_x=u(ranges.blur_sigma), sigma_y=u(ranges.blur_sigma),
                    theta=float(rng.uniform(0.0, 1.0)),
                    kernel_size=int(rng.choice(ranges.kernel_sizes)), kappa=u(ranges.kappa))
    if kind == "lowlight":
        return Lowlight(gamma=u(ranges.gamma))
    raise ValueError(f"unknown degradation kind {kind!r}")


def split_counts(n: int) -> tuple[int, int, int]:
    """8:1:1 split sizes; odd remainders go to validation."""
    n_train = int(math.floor(0.8 * n + 0.5))
    rest = n - n_train
    n_val = (rest + 1) // 2
    return n_train, n_val, rest - n_val


@dataclass
class CorpusEntry:
    clean_path: str
    degraded_path: str
    kind: str
    params: dict
    split: str

    @property
    def spec(self) -> DegradationSpec:
        return spec_from_dict(self.kind, self.params)


@dataclass
class CorpusManifest:
    entries: list[CorpusEntry]
    root: Path = field(default=Path("."))
    seed: int | None = None
    ranges: dict | None = None

    def split(self, name: str) -> list[CorpusEntry]:
        return [e for e in self.entries if e.split == name]

    def path(self, rel: str) -> Path:
        return self.root / rel

    def to_json(self) -> str:
        doc = {
            "version": 1,
            "seed": self.seed,
            "ranges": self.ranges,
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        for e in self.entries:
            for rel in (e.clean_path, e.degraded_path):
                if not (self.root / rel).is_file():
                    raise FileNotFoundError(f"manifest references missing file {rel}")
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json())
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        entries = [CorpusEntry(**e) for e in doc["entries"]]
        return cls(entries=entries, root=path.parent, seed=doc.get("seed"), ranges=doc.get("ranges"))


def _entry_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def build_corpus(clean_dir, out_dir, per_image_kinds="all", seed: int = 0,
                 ranges: SynthRanges | None = None, bit_depth: int = 16) -> CorpusManifest:
    """Synthesize a paired corpus and write ``out_dir/manifest.json``.

    ``per_image_kinds`` is ``"all"`` (every kind per clean image) or an integer
    number of kinds drawn per image. Clean images are copied into the corpus
    so every manifest path is relative to ``out_dir``.
    """
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    ranges = ranges or SynthRanges()
    if not clean_dir.is_dir():
        raise FileNotFoundError(f"clean directory not found: {clean_dir}")
    sources = sorted(p for p in clean_dir.iterdir() if p.suffix.lower() == ".png")
    if not sources:
        raise ValueError(f"no PNG images in {clean_dir}")
    images = [load_image(p) for p in sources]

    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "degraded").mkdir(parents=True, exist_ok=True)

    plan: list[tuple[int, str]] = []
    for i in range(len(sources)):
        if per_image_kinds == "all":
            kinds = list(CLASS_ORDER)
        else:
            n_k = int(per_image_kinds)
            if not 1 <= n_k <= len(CLASS_ORDER):
                raise ValueError("per_image_kinds must be 'all' or in [1, 4]")
            pick = _entry_rng(seed, 10_000_000 + i).choice(len(CLASS_ORDER), size=n_k, replace=False)
            kinds = [CLASS_ORDER[j] for j in sorted(pick)]
        plan.extend((i, k) for k in kinds)

    for src, img in zip(sources, images):
        save_image(img, out_dir / "clean" / f"{src.stem}.png", bit_depth=bit_depth)

    entries = []
    for idx, (i, kind) in enumerate(plan):
        src, img = sources[i], images[i]
        clean_rel = f"clean/{src.stem}.png"
        spec = sample_spec(kind, _entry_rng(seed, idx), ranges)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            degraded = apply_degradation(img, spec)
        deg_rel = f"degraded/{src.stem}_{kind}.png"
        save_image(degraded, out_dir / deg_rel, bit_depth=bit_depth)
        entries.append(CorpusEntry(clean_rel, deg_rel, kind, spec_to_dict(spec), ""))

    order = np.random.default_rng(np.random.SeedSequence([seed, 7_777_777])).permutation(len(entries))
    n_train, n_val, _ = split_counts(len(entries))
    for rank, idx in enumerate(order):
        entries[idx].split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    manifest = CorpusManifest(entries=entries, root=out_dir, seed=seed, ranges=ranges.to_dict())
    manifest.write(out_dir / "manifest.json")
    log.info("corpus: %d pairs (%d/%d/%d)", len(entries), *split_counts(len(entries)))
    return manifest
