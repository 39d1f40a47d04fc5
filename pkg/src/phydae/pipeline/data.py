"""Loading manifest splits into arrays and seeded paired augmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import CLASS_ORDER
from ..degrade import CorpusEntry, CorpusManifest
from ..image_core import load_image


@dataclass
class PairedSet:
    degraded: np.ndarray  # (N, H, W, C)
    clean: np.ndarray
    kinds: list
    labels: np.ndarray
    ids: list
    entries: list

    def __len__(self) -> int:
        return len(self.kinds)

    def subset(self, idx) -> "PairedSet":
        idx = np.asarray(idx, dtype=np.intp)
        return PairedSet(self.degraded[idx], self.clean[idx], [self.kinds[i] for i in idx],
                         self.labels[idx], [self.ids[i] for i in idx], [self.entries[i] for i in idx])


def center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return arr[top:top + size, left:left + size]


def sample_id(entry: CorpusEntry) -> str:
    return entry.degraded_path


def load_entries(manifest: CorpusManifest, entries, size: int) -> PairedSet:
    if not entries:
        raise ValueError("no entries to load")
    deg, clean = [], []
    for e in entries:
        deg.append(center_crop(load_image(manifest.path(e.degraded_path)).data, size))
        clean.append(center_crop(load_image(manifest.path(e.clean_path)).data, size))
    kinds = [e.kind for e in entries]
    labels = np.array([CLASS_ORDER.index(k) for k in kinds], dtype=np.int64)
    return PairedSet(np.stack(deg), np.stack(clean), kinds, labels,
                     [sample_id(e) for e in entries], list(entries))


def load_split(manifest: CorpusManifest, split, size: int) -> PairedSet:
    names = [split] if isinstance(split, str) else list(split)
    entries = [e for name in names for e in manifest.split(name)]
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    return load_entries(manifest, entries, size)


def augment_pair(deg: np.ndarray, clean: np.ndarray, rng: np.random.Generator):
    """Same random flips and quarter turns applied to both images of a pair."""
    out_d, out_c = [], []
    for d, c in zip(deg, clean):
        if rng.random() < 0.5:
            d, c = d[:, ::-1], c[:, ::-1]
        if rng.random() < 0.5:
            d, c = d[::-1], c[::-1]
        k = int(rng.integers(4))
        d, c = np.rot90(d, k), np.rot90(c, k)
        out_d.append(np.ascontiguousarray(d))
        out_c.append(np.ascontiguousarray(c))
    return np.stack(out_d), np.stack(out_c)


def one_hot(labels, n: int = len(CLASS_ORDER)) -> np.ndarray:
    return np.eye(n)[np.asarray(labels, dtype=np.intp)]
