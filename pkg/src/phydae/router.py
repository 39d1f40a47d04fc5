"""Expert routing: fused visual / frequency / degradation-prior logits,
temperature softmax and top-k sparse dispatch."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import CLASS_ORDER
from .nn import Conv2d, Linear, Module, Param, Tensor, as_tensor
from .nn import functional as F

ENTROPY_THRESHOLD = 0.6 * math.log(4.0)

ROUTE_TRACE_SCHEMA = {
    "type": "object",
    "required": ["sample_id", "pi", "logits", "tau", "k", "top_indices", "top_weights"],
    "properties": {
        "sample_id": {"type": ["string", "integer"]},
        "pi": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 4, "maxItems": 4},
        "logits": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "k": {"type": "integer", "minimum": 1},
        "top_indices": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "top_weights": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
    },
    "additionalProperties": True,
}


@dataclass
class RoutingFeatures:
    h_visual: Tensor
    h_freq: Tensor
    h_deg: Tensor
    alpha: float
    logits: Tensor


@dataclass
class RoutingDecision:
    full_weights: Tensor
    top_indices: np.ndarray
    top_weights: Tensor
    temperature: float
    k: int

    def __post_init__(self):
        tw = self.top_weights.data
        if (tw < 0).any() or not np.allclose(tw.sum(axis=-1), 1.0, atol=1e-6):
            raise ValueError("top weights must be nonnegative and sum to 1")

    def selected(self) -> np.ndarray:
        """Highest-weight expert per sample."""
        return self.top_indices[:, 0]

    def mean_activation(self) -> Tensor:
        return self.full_weights.mean(axis=0)

    def trace_records(self, sample_ids, pi: np.ndarray, logits: np.ndarray) -> list[dict]:
        recs = []
        for i, sid in enumerate(sample_ids):
            rec = {
                "sample_id": sid,
                "pi": [float(v) for v in pi[i]],
                "logits": [float(v) for v in logits[i]],
                "tau": float(self.temperature),
                "k": int(self.k),
                "top_indices": [int(v) for v in self.top_indices[i]],
                "top_weights": [float(v) for v in self.top_weights.data[i]],
            }
            jsonschema.validate(rec, ROUTE_TRACE_SCHEMA)
            recs.append(rec)
        return recs


def dump_trace(records, path) -> None:
    """Write one JSON object per line; the file is replaced atomically."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)


class Router(Module):
    """h_visual from a zero-initialised 1x1 head pooled globally, h_freq from
    a zero-initialised linear head on pooled frequency features, and
    h_deg = pi @ W_deg with W_deg starting at ``prior_scale`` times identity."""

    def __init__(self, feat_dim: int, freq_dim: int, rng: np.random.Generator, *,
                 n_experts: int = len(CLASS_ORDER), n_classes: int = len(CLASS_ORDER),
                 alpha: float = 1.0, prior_scale: float = 2.0):
        self.n_experts = n_experts
        self.alpha = float(alpha)
        self.visual = Conv2d(feat_dim, n_experts, 1, rng, zero_init=True)
        self.freq = Linear(freq_dim, n_experts, rng, zero_init=True)
        self.W_deg = Param(prior_scale * np.eye(n_classes, n_experts), "W_deg")

    def features(self, X: Tensor, f_emb, pi) -> RoutingFeatures:
        h_visual = F.global_avg_pool(self.visual(X))
        f = f_emb.f_concat if hasattr(f_emb, "f_concat") else f_emb
        h_freq = self.freq(F.global_avg_pool(f))
        probs = pi.probs if hasattr(pi, "probs") else as_tensor(pi)
        h_deg = probs @ self.W_deg
        logits = h_visual + h_freq
        if self.alpha != 0.0:
            logits = logits + h_deg * self.alpha
        return RoutingFeatures(h_visual, h_freq, h_deg, self.alpha, logits)


def route(logits, tau: float, k: int) -> RoutingDecision:
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    n_exp = logits.shape[-1]
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if not 1 <= k <= n_exp:
        raise ValueError(f"k={k} outside [1, {n_exp}]")
    full = F.softmax(logits / float(tau), axis=-1)
    # stable sort on the negated weights keeps the lower index first on ties
    order = np.argsort(-full.data, axis=-1, kind="stable")[:, :k]
    rows = np.arange(full.shape[0])[:, None]
    picked = full[rows, order]
    top = picked / picked.sum(axis=-1, keepdims=True)
    return RoutingDecision(full, order, top, float(tau), int(k))


def moe_forward(x, E, decision: RoutingDecision, bank) -> Tensor:
    """Weighted sum of the selected experts; unselected experts never run."""
    x = as_tensor(x)
    n = x.shape[0]
    cond = E.levels[0] if hasattr(E, "levels") else E
    out = None
    for e in range(len(bank)):
        rows, slots = np.nonzero(decision.top_indices == e)
        if rows.size == 0:
            continue
        xe = F.take_rows(x, rows)
        ce = None if cond is None else F.take_rows(cond, rows)
        ye = bank.apply(e, xe, ce)
        w = decision.top_weights[rows, slots].reshape(-1, 1, 1, 1)
        part = F.scatter_rows(ye * w, rows, n)
        out = part if out is None else out + part
    return out


def posterior_entropy(pi) -> np.ndarray:
    p = np.asarray(pi.pi if hasattr(pi, "pi") else pi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def dynamic_k(pi, threshold: float = ENTROPY_THRESHOLD, k_low: int = 1, k_high: int = 2):
    """k_low when the posterior entropy is at most ``threshold``, else k_high."""
    h = posterior_entropy(pi)
    k = np.where(h <= threshold, k_low, k_high)
    return int(k) if k.ndim == 0 else k
