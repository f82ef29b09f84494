"""Teacher targets, utterance/frame/total losses and the EMA teacher update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import EncoderOutputs
from .masking import MaskPlan


@dataclass
class TeacherState:
    params: dict[str, Tensor]  # mirrors the student tree, never requires grad
    tau: float = 0.999
    update_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {self.tau}")
        for t in self.params.values():
            t.requires_grad = False

    @classmethod
    def from_student(cls, student_params: Mapping[str, Tensor], tau: float = 0.999) -> "TeacherState":
        return cls({k: Tensor(v.data.copy()) for k, v in student_params.items()}, tau)


@dataclass
class LossBreakdown:
    utterance: float
    frame: float
    total: float
    alpha: float = 0.5


def _normalize_rows(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def teacher_targets(
    out: EncoderOutputs | list,
    cls_row: int | None = 0,
    normalize: bool = True,
) -> np.ndarray:
    """Average the per-layer teacher features (CLS row removed); no gradient.

    With ``normalize`` each layer is first standardized per token across the
    feature axis.
    """
    layers = out.per_layer if isinstance(out, EncoderOutputs) else out
    if not layers:
        raise ValueError("teacher produced no layer outputs")
    acc = None
    for y in layers:
        y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
        if cls_row is not None:
            y = np.delete(y, cls_row, axis=0)
        if normalize:
            y = _normalize_rows(y)
        acc = y.copy() if acc is None else acc + y
    return acc / len(layers)


def utterance_loss(cls_student: Tensor, targets: np.ndarray) -> Tensor:
    """Squared L2 distance between the student CLS row and the token-mean of ``targets``."""
    gap = np.asarray(targets, dtype=np.float64).mean(axis=0, keepdims=True)
    if cls_student.shape != gap.shape:
        raise ag.ShapeError(f"CLS {cls_student.shape} vs pooled target {gap.shape}")
    return ag.l2sq(ag.sub(cls_student, Tensor(gap)))


def frame_loss(pred: Tensor, targets: np.ndarray, plan: MaskPlan | None = None, mode: str = "masked_only") -> Tensor:
    """Mean squared error over all entries of the selected token rows.

    ``masked_only`` scores the rows ``plan`` hides from the student; ``all``
    scores every row.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if pred.shape != targets.shape:
        raise ag.ShapeError(f"prediction {pred.shape} vs target {targets.shape}")
    if mode == "all":
        rows = np.arange(pred.shape[0])
    elif mode == "masked_only":
        if plan is None:
            raise ValueError("masked_only frame loss needs a mask plan")
        rows = plan.masked_index
    else:
        raise ValueError(f"unknown frame loss mode {mode!r}")
    if rows.size == 0:
        return Tensor(0.0)
    diff = ag.sub(ag.take_rows(pred, rows), Tensor(targets[rows]))
    return ag.scale(ag.l2sq(diff), 1.0 / diff.data.size)


def total_loss(u, f, alpha: float = 0.5):
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if isinstance(u, Tensor) or isinstance(f, Tensor):
        u = u if isinstance(u, Tensor) else Tensor(u)
        f = f if isinstance(f, Tensor) else Tensor(f)
        return ag.add(ag.scale(u, alpha), f)
    return alpha * u + f


def ema_update(teacher: TeacherState, student_params: Mapping[str, Tensor]) -> TeacherState:
    """In place: every teacher tensor becomes tau * teacher + (1 - tau) * student."""
    if teacher.params.keys() != student_params.keys():
        missing = set(teacher.params) ^ set(student_params)
        raise ag.ShapeError(f"teacher/student parameter trees differ: {sorted(missing)[:5]}")
    for name, t in teacher.params.items():
        s = student_params[name]
        if t.shape != s.shape:
            raise ag.ShapeError(f"{name}: teacher {t.shape} vs student {s.shape}")
    tau = teacher.tau
    for name, t in teacher.params.items():
        s = student_params[name].data
        if tau == 0.0:
            t.data[...] = s
        elif tau != 1.0:
            t.data *= tau
            t.data += (1.0 - tau) * s
    teacher.update_count += 1
    return teacher
