"""Binary parameter container plus JSON sidecar.

Layout (little-endian): magic ``PHYDAECK``, u32 version, u32 entry count, then
per entry: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims, float32 data.
The sidecar ``<path>.json`` holds configs, step and RNG state.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig

MAGIC = b"PHYDAECK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointBundle:
    state: dict
    model_config: ModelConfig
    step: int = 0
    rng_state: dict | None = None
    train_config: TrainConfig | None = None
    extra: dict = field(default_factory=dict)


def snap_float32(model) -> None:
    """Round every parameter to the nearest float32 value (kept as float64)."""
    for p in model.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def encode_state(state: dict) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_state(blob: bytes) -> dict:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    state = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            state[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if off != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return state


def save_checkpoint(path, model, step: int = 0, rng_state: dict | None = None,
                    train_config: TrainConfig | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory missing: {path.parent}")
    _atomic_write(path, encode_state(model.state_dict()))
    meta = {
        "format": "phydae-checkpoint",
        "version": VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "step": int(step),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    _atomic_write(sidecar_path(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return path


def load_checkpoint(path) -> CheckpointBundle:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    side = sidecar_path(path)
    if not side.is_file():
        raise FileNotFoundError(f"checkpoint sidecar missing: {side}")
    meta = json.loads(side.read_text())
    state = decode_state(path.read_bytes())
    tc = meta.get("train_config")
    return CheckpointBundle(
        state=state,
        model_config=ModelConfig.from_dict(meta["model_config"]),
        step=int(meta.get("step", 0)),
        rng_state=meta.get("rng_state"),
        train_config=TrainConfig.from_dict(tc) if tc else None,
        extra=meta.get("extra", {}),
    )


def build_model(bundle: CheckpointBundle):
    from .model import PhyDAE
    model = PhyDAE(bundle.model_config)
    model.load_state_dict(bundle.state)
    return model
