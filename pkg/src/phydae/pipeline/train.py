"""Desk-scale trainer for the two-stage model."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import losses as L
from ..degrade import CorpusManifest
from ..nn import AdamW, Tensor, warmup_cosine
from ..nn import functional as F
from .checkpoint import save_checkpoint, snap_float32
from .config import ModelConfig, TrainConfig
from .data import PairedSet, augment_pair, load_split, one_hot
from .evaluate import evaluate
from .model import PhyDAE

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite training loss {value} at step {step}")
        self.step = step
        self.value = value


@dataclass
class StepOutcome:
    objective: Tensor
    report: L.LossReport


@dataclass
class TrainResult:
    model: PhyDAE
    step_log: list = field(default_factory=list)
    epoch_log: list = field(default_factory=list)
    checkpoint: Path | None = None
    steps: int = 0


def batch_objective(model: PhyDAE, y: np.ndarray, clean: np.ndarray, kinds, labels,
                    tc: TrainConfig, step: int) -> StepOutcome:
    """Forward pass and the scalar objective: the weighted total plus the
    auxiliary posterior cross-entropy and stage-1 L1 terms."""
    cfg = model.cfg
    w = tc.loss_weights
    out = model.forward(y, k=cfg.k_train, tau=cfg.tau)
    target = Tensor(clean)
    pi = Tensor(one_hot(labels)) if tc.gt_posterior else out.posterior
    daot, w2, reg = L.daot_loss(out.restored, target, out.residual, pi, w.lambda_freq, seed=step)
    pix = L.pixel_loss(out.restored, target, kinds, w.beta)
    bal = L.balance_loss(out.decision.mean_activation())
    z = F.l2_normalize(F.global_avg_pool(out.pyramid[0]), axis=-1)
    con = L.contrastive_loss(z, labels, cfg.tau_c, on_empty="zero")
    total = L.combine(daot, pix.total, bal, con, w)
    ce = -(out.posterior.log_probs() * one_hot(labels)).sum(axis=-1).mean()
    s1 = F.abs(out.coarse - target).mean()
    objective = total + ce * tc.lambda_cls + s1 * tc.lambda_stage1
    report = L.total_loss(daot, pix.total, bal, con, w, breakdown={
        "w2": float(w2.data), "freq_reg": float(reg.data), "l1": float(pix.l1.data),
        "fft": float(pix.fft.data), "ssim_term": float(pix.ssim_term.data),
        "posterior_ce": float(ce.data), "stage1_l1": float(s1.data),
        "objective": float(objective.data)})
    return StepOutcome(objective, report)


def _atomic_lines(path: Path, records) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)


def plan_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches; a trailing batch of one sample is dropped (the
    distribution term needs two)."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


def train(manifest: CorpusManifest, model_cfg: ModelConfig, tc: TrainConfig, out_dir=None,
          train_set: PairedSet | None = None, val_set: PairedSet | None = None,
          max_steps: int | None = None, validate: bool = True,
          on_epoch: Callable[[dict], None] | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise the objective over the train split; optionally writes
    ``checkpoint.bin`` (+ sidecar), ``metrics.jsonl`` (one line per step) and
    ``epochs.jsonl`` (one line per epoch) into ``out_dir``."""
    train_set = train_set or load_split(manifest, "train", tc.image_size)
    if validate and val_set is None and manifest.split("val"):
        val_set = load_split(manifest, "val", tc.image_size)
    model = PhyDAE(model_cfg, seed=tc.seed)
    snap_float32(model)
    params = model.stage2.parameters() if tc.freeze_stage1 else model.parameters()
    opt = AdamW(params, lr=tc.lr, betas=(tc.beta1, tc.beta2), weight_decay=tc.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 2]))

    steps_per_epoch = len(plan_batches(len(train_set), tc.batch_size, np.random.default_rng(0)))
    if steps_per_epoch == 0:
        raise ValueError("training split too small for one batch of two")
    total_steps = steps_per_epoch * tc.epochs
    warmup = min(tc.warmup_epochs * steps_per_epoch, total_steps - 1)
    result = TrainResult(model)
    step = 0
    for epoch in range(tc.epochs):
        ep_losses = []
        for idx in plan_batches(len(train_set), tc.batch_size, rng):
            if max_steps is not None and step >= max_steps:
                break
            y, clean = train_set.degraded[idx], train_set.clean[idx]
            if tc.augment:
                y, clean = augment_pair(y, clean, rng)
            kinds = [train_set.kinds[i] for i in idx]
            labels = train_set.labels[idx]
            model.zero_grad()
            res = batch_objective(model, y, clean, kinds, labels, tc, step)
            value = float(res.objective.data)
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            res.objective.backward()
            lr = warmup_cosine(step, total_steps, warmup, tc.lr, tc.min_lr)
            opt.step(lr)
            snap_float32(model)
            rec = {"step": step, "epoch": epoch, "lr": lr, **res.report.to_dict()}
            result.step_log.append(rec)
            if on_step is not None:
                on_step(rec)
            ep_losses.append(res.report.total)
            step += 1
        if not ep_losses:
            break
        ep = {"epoch": epoch, "steps": step, "train_total": float(np.mean(ep_losses))}
        if validate and val_set is not None:
            table = evaluate(model, val_set, k=model_cfg.k_infer)
            ep["val_psnr"], ep["val_ssim"] = table.avg_psnr, table.avg_ssim
        result.epoch_log.append(ep)
        log.info("epoch %d: %s", epoch, ep)
        if on_epoch is not None:
            on_epoch(ep)
    result.steps = step
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(out_dir / "checkpoint.bin", model, step=step,
                                            rng_state=rng.bit_generator.state, train_config=tc)
        _atomic_lines(out_dir / "metrics.jsonl", result.step_log)
        _atomic_lines(out_dir / "epochs.jsonl", result.epoch_log)
    return result
