"""Per-degradation metric tables and routing inspection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import CLASS_ORDER
from ..degrade import Haze, Lowlight, haze_transmission
from ..experts import DehazeExpert, LowlightExpert
from ..image_core import MetricReport, psnr, ssim
from ..nn import no_grad
from .data import PairedSet


@dataclass
class EvalTable:
    per_kind: dict
    counts: dict
    per_sample: list = field(default_factory=list)

    @property
    def avg_psnr(self) -> float:
        """Arithmetic mean of the per-kind PSNRs over the kinds present."""
        return float(np.mean([r.psnr_db for r in self.per_kind.values()]))

    @property
    def avg_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.per_kind.values()]))

    def to_dict(self) -> dict:
        d = {k: {"psnr": r.psnr_db, "ssim": r.ssim, "n": self.counts[k]} for k, r in self.per_kind.items()}
        d["avg"] = {"psnr": self.avg_psnr, "ssim": self.avg_ssim}
        return d

    def format(self) -> str:
        lines = [f"{'kind':<10}{'n':>4}{'PSNR':>10}{'SSIM':>9}"]
        for k, r in self.per_kind.items():
            lines.append(f"{k:<10}{self.counts[k]:>4}{r.psnr_db:>10.3f}{r.ssim:>9.4f}")
        lines.append(f"{'4D-AVG':<10}{sum(self.counts.values()):>4}{self.avg_psnr:>10.3f}{self.avg_ssim:>9.4f}")
        return "\n".join(lines)


def table_from_outputs(data: PairedSet, restored: np.ndarray) -> EvalTable:
    scores = {k: [] for k in CLASS_ORDER}
    per_sample = []
    for i, kind in enumerate(data.kinds):
        p, s = psnr(restored[i], data.clean[i]), ssim(restored[i], data.clean[i])
        scores[kind].append((p, s))
        per_sample.append({"id": data.ids[i], "kind": kind, "psnr": p, "ssim": s})
    per_kind, counts = {}, {}
    for kind in CLASS_ORDER:
        if scores[kind]:
            arr = np.array(scores[kind])
            per_kind[kind] = MetricReport(float(arr[:, 0].mean()), float(arr[:, 1].mean()))
            counts[kind] = len(scores[kind])
    return EvalTable(per_kind, counts, per_sample)


def run_model(model, degraded: np.ndarray, k: int | None = None, batch: int = 8,
              tau: float | None = None) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, len(degraded), batch):
            outs.append(model.forward(degraded[i:i + batch], k=k, tau=tau).restored.data)
    return np.concatenate(outs)


def evaluate(model, data: PairedSet, k: int | None = None, tau: float | None = None) -> EvalTable:
    return table_from_outputs(data, run_model(model, data.degraded, k, tau=tau))


def evaluate_identity(data: PairedSet) -> EvalTable:
    """Degraded-input baseline: the restorer returns its input."""
    return table_from_outputs(data, data.degraded)


def oracle_restore(entry, degraded: np.ndarray) -> np.ndarray | None:
    """Invert haze or low light with the true synthesis parameters; None for
    kinds without an exact algebraic inverse."""
    spec = entry.spec
    h, w = degraded.shape[:2]
    if isinstance(spec, Haze):
        t = np.asarray(haze_transmission(spec, h, w), dtype=np.float64)
        if t.ndim == 2:
            t = t[:, :, None]
        return DehazeExpert.oracle(degraded, t, np.asarray(spec.A)).data
    if isinstance(spec, Lowlight):
        return LowlightExpert.oracle(degraded, 1.0, spec.gamma).data
    return None


@dataclass
class RoutingReport:
    confusion: np.ndarray  # rows: true kind, cols: selected expert
    posterior_confusion: np.ndarray
    usage: np.ndarray  # selections per expert over all top-k slots
    records: list
    k: int

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())

    @property
    def posterior_accuracy(self) -> float:
        return float(np.trace(self.posterior_confusion) / self.posterior_confusion.sum())

    @property
    def usage_cv(self) -> float:
        u = self.usage.astype(np.float64)
        return float(u.std() / u.mean()) if u.mean() > 0 else float("inf")

    def format(self) -> str:
        head = "true\\expert " + " ".join(f"{k:>9}" for k in CLASS_ORDER)
        rows = [head]
        for i, kind in enumerate(CLASS_ORDER):
            rows.append(f"{kind:<12}" + " ".join(f"{v:>9d}" for v in self.confusion[i]))
        rows.append(f"routing accuracy {self.accuracy:.3f}  posterior accuracy {self.posterior_accuracy:.3f}")
        rows.append("usage " + " ".join(f"{k}={v}" for k, v in zip(CLASS_ORDER, self.usage)) +
                    f"  cv={self.usage_cv:.3f}")
        return "\n".join(rows)


def inspect_routing(model, data: PairedSet, k: int = 1, tau: float | None = None,
                    batch: int = 8) -> RoutingReport:
    n_cls = len(CLASS_ORDER)
    conf = np.zeros((n_cls, n_cls), dtype=np.int64)
    pconf = np.zeros((n_cls, n_cls), dtype=np.int64)
    usage = np.zeros(n_cls, dtype=np.int64)
    records = []
    with no_grad():
        for s in range(0, len(data), batch):
            out = model.forward(data.degraded[s:s + batch], k=k, tau=tau)
            dec = out.decision
            sel = dec.selected()
            pred = out.posterior.argmax()
            for i, lab in enumerate(data.labels[s:s + batch]):
                conf[lab, sel[i]] += 1
                pconf[lab, pred[i]] += 1
            np.add.at(usage, dec.top_indices.ravel(), 1)
            records += dec.trace_records(data.ids[s:s + batch], out.posterior.pi, out.features.logits.data)
    return RoutingReport(conf, pconf, usage, records, k)
