"""Parameter containers and standard layers."""
from __future__ import annotations

import contextlib
import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Param, Tensor

_TRACE: list[str] | None = None
_MACS: list[int] | None = None


@contextlib.contextmanager
def trace_layers():
    """Record the description of every leaf layer called inside the block."""
    global _TRACE
    prev, _TRACE = _TRACE, []
    try:
        yield _TRACE
    finally:
        _TRACE = prev


@contextlib.contextmanager
def count_macs():
    """Accumulate multiply-accumulates of every conv/linear call inside the
    block; yields a one-element list holding the running total."""
    global _MACS
    prev, _MACS = _MACS, [0]
    try:
        yield _MACS
    finally:
        _MACS = prev


def _record(desc: str) -> None:
    if _TRACE is not None:
        _TRACE.append(desc)


def _add_macs(n: int) -> None:
    if _MACS is not None:
        _MACS[0] += int(n)


def _walk(val, path: str):
    if isinstance(val, Param):
        yield path, val
    elif isinstance(val, Module):
        yield from val.named_parameters(path + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{path}.{i}")


class Module:
    """Base class: attributes that are Params, Modules or lists of Modules
    are discovered automatically for parameter enumeration."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, *,
                 stride: int = 1, groups: int = 1, bias: bool = True, zero_init: bool = False):
        if cin % groups or cout % groups:
            raise ValueError(f"channels {cin}->{cout} not divisible by groups={groups}")
        self.cin, self.cout, self.kernel, self.stride, self.groups = cin, cout, kernel, stride, groups
        fan_in = kernel * kernel * cin // groups
        shape = (kernel, kernel, cin // groups, cout)
        if zero_init:
            w = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / fan_in) / math.sqrt(2.0)
            w = rng.uniform(-bound, bound, size=shape)
        self.weight = Param(w, "weight")
        self.bias = Param(np.zeros(cout), "bias") if bias else None

    def describe(self) -> str:
        kind = "dw" if self.groups == self.cin == self.cout and self.groups > 1 else (
            f"g{self.groups}" if self.groups > 1 else "")
        tag = f"Conv{self.kernel}x{self.kernel}"
        if kind:
            tag += f"[{kind}]"
        if self.stride > 1:
            tag += f"/s{self.stride}"
        return tag

    def forward(self, x: Tensor) -> Tensor:
        _record(self.describe())
        _add_macs(x.shape[0] * self.macs(x.shape[1], x.shape[2]))
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, groups=self.groups)

    def macs(self, h: int, w: int) -> int:
        ho, wo = -(-h // self.stride), -(-w // self.stride)
        return ho * wo * self.kernel * self.kernel * (self.cin // self.groups) * self.cout


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, *,
                 bias: bool = True, zero_init: bool = False):
        self.din, self.dout = din, dout
        if zero_init:
            w = np.zeros((din, dout))
        else:
            bound = 1.0 / math.sqrt(din)
            w = rng.uniform(-bound, bound, size=(din, dout))
        self.weight = Param(w, "weight")
        self.bias = Param(np.zeros(dout), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        _record("Linear")
        _add_macs(x.size // self.din * self.din * self.dout)
        return F.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.groups, self.eps = groups, eps
        self.gamma = Param(np.ones(channels), "gamma")
        self.beta = Param(np.zeros(channels), "beta")

    def forward(self, x: Tensor) -> Tensor:
        _record("GroupNorm")
        return F.group_norm(x, self.gamma, self.beta, self.groups, self.eps)


def norm_groups(channels: int, preferred: int = 4) -> int:
    """Largest divisor of ``channels`` not exceeding ``preferred``."""
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1
