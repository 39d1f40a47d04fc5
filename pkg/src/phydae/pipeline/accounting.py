"""Parameter and multiply-accumulate accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import Module, count_macs, no_grad
from .config import ModelConfig


@dataclass(frozen=True)
class CostReport:
    params: int
    macs: int
    image_size: int
    per_part: dict

    def format(self) -> str:
        lines = [f"parameters {self.params:,}", f"MACs @ {self.image_size}x{self.image_size}: {self.macs:,}"]
        lines += [f"  {k:<10}{v:>12,}" for k, v in self.per_part.items()]
        return "\n".join(lines)


def count_params(obj) -> int:
    """Exact trainable parameter count of a module, or of a model built from a config."""
    if isinstance(obj, ModelConfig):
        from .model import PhyDAE
        obj = PhyDAE(obj)
    if not isinstance(obj, Module):
        raise TypeError(f"expected Module or ModelConfig, got {type(obj).__name__}")
    return obj.n_params()


def cost_report(cfg: ModelConfig, image_size: int = 64, k: int | None = None) -> CostReport:
    """Parameters plus the MACs of one single-image forward pass."""
    from .model import PhyDAE
    model = PhyDAE(cfg)
    y = np.full((1, image_size, image_size, cfg.channels), 0.5)
    with no_grad(), count_macs() as total:
        model.forward(y, k=k)
    parts = {"stage1": model.stage1.n_params(), "rmp": model.stage2.rmp.n_params(),
             "fadd": model.stage2.fadd.n_params(), "router": model.stage2.router.n_params(),
             "experts": model.stage2.experts.n_params()}
    parts["main"] = model.n_params() - sum(parts.values())
    return CostReport(model.n_params(), total[0], image_size, parts)
