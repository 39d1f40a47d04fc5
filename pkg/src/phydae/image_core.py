"""Image carrier type, PNG I/O and full-reference quality metrics."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class ImageTensor:
    """Immutable H x W x C float64 image with every value finite and in [0, 1]."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3) or min(arr.shape[:2]) < 1:
            raise ValueError(f"expected H x W x C with C in (1, 3), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"image values outside [0, 1]: [{arr.min()}, {arr.max()}]")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def clamp(cls, data) -> "ImageTensor":
        arr = np.nan_to_num(np.asarray(data, dtype=np.float64), nan=0.0, posinf=1.0, neginf=0.0)
        return cls(np.clip(arr, 0.0, 1.0))

    @classmethod
    def full(cls, height: int, width: int, value: float, channels: int = 3) -> "ImageTensor":
        return cls(np.full((height, width, channels), float(value)))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def channels(self) -> int:
        return self._data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageTensor) and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"ImageTensor({self.height}x{self.width}x{self.channels})"


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float


def _as_array(img) -> np.ndarray:
    arr = np.asarray(img.data if isinstance(img, ImageTensor) else img, dtype=np.float64)
    return arr[:, :, None] if arr.ndim == 2 else arr


# ----------------------------------------------------------------------
# I/O
# ----------------------------------------------------------------------
def load_image(path) -> ImageTensor:
    """Read an 8- or 16-bit grayscale/RGB PNG scaled to [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    if path.suffix.lower() != ".png":
        raise ValueError(f"unsupported format {path.suffix!r}; only PNG is supported")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"unreadable image: {path}")
    if raw.size == 0:
        raise ValueError(f"zero-sized image: {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValueError(f"unsupported bit depth {raw.dtype} in {path}")
    if raw.ndim == 3:
        if raw.shape[2] != 3:
            raise ValueError(f"unsupported channel count {raw.shape[2]} in {path}")
        raw = raw[:, :, ::-1]
    return ImageTensor(raw.astype(np.float64) / scale)


def image_bit_depth(path) -> int:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"unreadable image: {path}")
    return 16 if raw.dtype == np.uint16 else 8


def save_image(img: ImageTensor, path, bit_depth: int = 8) -> None:
    """Write a PNG, rounding to the nearest quantisation level.

    The file is written to a temporary name and renamed, so readers never
    observe a partial image.
    """
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory missing: {path.parent}")
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    arr = _as_array(img)
    scale, dtype = (255.0, np.uint8) if bit_depth == 8 else (65535.0, np.uint16)
    q = np.rint(np.clip(arr, 0.0, 1.0) * scale).astype(dtype)
    q = q[:, :, 0] if q.shape[2] == 1 else np.ascontiguousarray(q[:, :, ::-1])
    tmp = path.with_name(f".{path.stem}.tmp.png")
    if not cv2.imwrite(str(tmp), q):
        raise OSError(f"failed to write {path}")
    os.replace(tmp, path)


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------
def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(a, b, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB for peak value 1.0, capped at ``cap``."""
    x, y = _check_pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse <= np.finfo(np.float64).tiny:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def ssim_map(a, b, window: int = SSIM_WINDOW) -> np.ndarray:
    """Local SSIM over every window x window patch (stride 1), per channel."""
    x, y = _check_pair(a, b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape[:2]} smaller than {window}x{window} SSIM window")
    wx = sliding_window_view(x, (window, window), axis=(0, 1))
    wy = sliding_window_view(y, (window, window), axis=(0, 1))
    mx = wx.mean(axis=(-1, -2))
    my = wy.mean(axis=(-1, -2))
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    # identical centred forms make ssim(a, a) == 1 exactly
    vx = (dx * dx).mean(axis=(-1, -2))
    vy = (dy * dy).mean(axis=(-1, -2))
    cov = (dx * dy).mean(axis=(-1, -2))
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return num / den


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM with uniform windows and C1=0.01^2, C2=0.03^2."""
    return float(np.clip(ssim_map(a, b, window).mean(), -1.0, 1.0))


def evaluate_pair(restored, reference) -> MetricReport:
    return MetricReport(psnr_db=psnr(restored, reference), ssim=ssim(restored, reference))
