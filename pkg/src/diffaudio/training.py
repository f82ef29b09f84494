"""Adam with decoupled weight decay, warmup-cosine schedule, pretraining and fine-tuning steps."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import RunConfig
from .masking import block_mask, make_clones
from .model import Classifier, PretrainModel, mean_breakdown
from .objective import LossBreakdown, ema_update

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def decay_exempt(name: str, p: Tensor) -> bool:
    """Biases, norm gains, CLS and mask embeddings skip weight decay."""
    return p.ndim <= 1 or name.endswith("cls") or name.endswith("mask_emb")


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    grads: Mapping[str, np.ndarray] | None = None,
    exempt=decay_exempt,
) -> AdamState:
    """One in-place Adam update with bias correction and decoupled weight decay.

    Gradients come from ``grads`` when given, else from each tensor's ``.grad``
    (missing gradients count as zero).
    """
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ag.ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ag.ShapeError(f"{name}: optimizer state {m.shape} vs parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and not exempt(name, p):
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def cosine_warmup_lr(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear ramp to ``peak`` over ``warmup_steps``, then half-cosine decay to 0 at ``total_steps``."""
    if warmup_steps > total_steps:
        raise ValueError(f"warmup_steps={warmup_steps} exceeds total_steps={total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps == warmup_steps:
        return peak
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def _seed_for(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def pretrain_step(
    batch: Sequence[np.ndarray],
    model: PretrainModel,
    opt: AdamState,
    lr: float,
    step: int = 0,
    update: bool = True,
) -> LossBreakdown:
    """One multi-clone pretraining step on a batch of fbank matrices.

    Each utterance gets one teacher pass and ``n_clones`` masked student
    passes.  Every clone's loss is back-propagated separately with weight
    ``1 / (batch * n_clones)``; accumulation makes the summed gradient equal
    that of the averaged loss.  Then one Adam step and one EMA update.
    """
    cfg = model.cfg
    params = model.parameters()
    ag.zero_grad(params.values())
    parts = []
    weight = 1.0 / (len(batch) * cfg.n_clones)
    for b, frames in enumerate(batch):
        targets = model.targets(frames)
        n_tokens = targets.shape[0]
        plans = make_clones(n_tokens, cfg.mask_ratio, cfg.block_size, cfg.n_clones, _seed_for(cfg.seed, step, b))
        for plan in plans:
            tot, u, f = model.clone_loss(frames, plan, targets)
            ag.scale(tot, weight).backward()
            parts.append((tot.item(), u.item(), f.item()))
    if update:
        adam_step(params, opt, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        ema_update(model.teacher, model.student.parameters())
    return mean_breakdown(parts, cfg.alpha)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i : i + batch_size]
        if n < batch_size:
            yield order


def pretrain(
    model: PretrainModel,
    clips: Sequence[np.ndarray],
    steps: int,
    metrics: TextIO | None = None,
) -> list[LossBreakdown]:
    """Run ``steps`` pretraining steps, writing one JSON line per step to ``metrics``."""
    cfg = model.cfg
    rng = np.random.default_rng(_seed_for(cfg.seed, 1))
    warmup = cfg.warmup_steps(steps)
    opt = AdamState()
    history = []
    batches = _batches(len(clips), cfg.batch_size, rng)
    for step in range(steps):
        lr = cosine_warmup_lr(step + 1, steps, warmup, cfg.peak_lr)
        idx = next(batches)
        br = pretrain_step([clips[i] for i in idx], model, opt, lr, step)
        history.append(br)
        rec = {"step": step + 1, "lr": lr, "loss_total": br.total, "loss_utt": br.utterance, "loss_frame": br.frame}
        if metrics is not None:
            metrics.write(json.dumps(rec) + "\n")
            metrics.flush()
        log.debug("pretrain %s", rec)
    return history


def classification_loss(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy for integer labels, sigmoid BCE for a 0/1 matrix."""
    lab = np.asarray(labels)
    if lab.ndim == 2:
        return ag.binary_cross_entropy_with_logits(logits, lab)
    return ag.cross_entropy(logits, lab)


def finetune_step(
    batch: Sequence[np.ndarray],
    labels,
    clf: Classifier,
    opt: AdamState,
    lr: float,
    step: int = 0,
    update: bool = True,
) -> float:
    """Masked (ratio ``finetune_mask_ratio``, dropped tokens) forward, loss, backprop, Adam."""
    cfg = clf.cfg
    lab = np.asarray(labels)
    if lab.shape[0] != len(batch):
        raise ValueError(f"{lab.shape[0]} labels for a batch of {len(batch)}")
    if lab.ndim == 2 and lab.shape[1] != clf.n_classes:
        raise ValueError(f"label matrix has {lab.shape[1]} classes, head has {clf.n_classes}")
    if lab.ndim == 1 and lab.size and (lab.min() < 0 or lab.max() >= clf.n_classes):
        raise ValueError(f"labels must lie in [0, {clf.n_classes})")
    params = clf.parameters()
    ag.zero_grad(params.values())
    rows = []
    for b, frames in enumerate(batch):
        plan = None
        if cfg.finetune_mask_ratio > 0:
            n = clf.backbone.embed(frames).tokens.shape[0]
            plan = block_mask(n, cfg.finetune_mask_ratio, cfg.block_size, _seed_for(cfg.seed, 7, step, b))
        rows.append(clf.logits(frames, plan))
    loss = classification_loss(ag.concat(rows, axis=0), lab)
    loss.backward()
    if update:
        adam_step(params, opt, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    return loss.item()


def finetune(
    clf: Classifier,
    clips: Sequence[np.ndarray],
    labels,
    steps: int,
    metrics: TextIO | None = None,
    lr: float | None = None,
) -> list[float]:
    cfg = clf.cfg
    peak = lr if lr is not None else cfg.ft_lr
    lab = np.asarray(labels)
    rng = np.random.default_rng(_seed_for(cfg.seed, 2))
    warmup = cfg.warmup_steps(steps)
    opt = AdamState()
    losses = []
    batches = _batches(len(clips), cfg.batch_size, rng)
    for step in range(steps):
        cur = cosine_warmup_lr(step + 1, steps, warmup, peak)
        idx = next(batches)
        loss = finetune_step([clips[i] for i in idx], lab[idx], clf, opt, cur, step)
        losses.append(loss)
        if metrics is not None:
            metrics.write(json.dumps({"step": step + 1, "lr": cur, "loss_total": loss}) + "\n")
    return losses
