"""Dual-softmax differential attention.

Projection layout: ``W_Q`` and ``W_K`` are ``(D, 2 * h * D')`` with head ``i``
owning the column block ``[2 i D', 2 (i + 1) D')``; the first ``D'`` columns of
that block give ``Q1``/``K1`` and the second ``D'`` give ``Q2``/``K2``.  ``W_V``
is ``(D, h * D')`` with head ``i`` owning ``[i D', (i + 1) D')``.  ``W_O`` is
``(h * D', D)`` and multiplies the head outputs concatenated in head order.

Within one head ``W_Q`` therefore restricts to a ``(D, 2D')`` matrix and
``W_V`` to ``(D, D')``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class DiffAttnParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    lam: float = 0.3
    n_heads: int = 8
    scale_dim: int | None = None  # d in sqrt(d); None means the head width

    def __post_init__(self):
        d_model = self.w_q.shape[0]
        if d_model % self.n_heads:
            raise ValueError(f"model width {d_model} is not divisible by {self.n_heads} heads")
        hd = d_model // self.n_heads
        if self.w_q.shape != (d_model, 2 * d_model) or self.w_k.shape != (d_model, 2 * d_model):
            raise ValueError(f"W_Q/W_K must be ({d_model}, {2 * d_model}), got {self.w_q.shape}, {self.w_k.shape}")
        if self.w_v.shape != (d_model, d_model):
            raise ValueError(f"W_V must be ({d_model}, {d_model}), got {self.w_v.shape}")
        if self.w_o.shape != (self.n_heads * hd, d_model):
            raise ValueError(f"W_O must be ({self.n_heads * hd}, {d_model}), got {self.w_o.shape}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d(self) -> int:
        return self.scale_dim or self.head_dim

    def parameters(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}

    @classmethod
    def init(cls, d_model: int, n_heads: int, lam: float = 0.3, rng=None, scale_dim=None, zero_out=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        std = 1.0 / math.sqrt(d_model)

        def w(rows, cols, zero=False):
            data = np.zeros((rows, cols)) if zero else rng.normal(0.0, std, (rows, cols))
            return Tensor(data, requires_grad=True)

        return cls(
            w(d_model, 2 * d_model),
            w(d_model, 2 * d_model),
            w(d_model, d_model),
            w(d_model, d_model, zero=zero_out),
            lam=lam,
            n_heads=n_heads,
            scale_dim=scale_dim,
        )


@dataclass
class AttentionTrace:
    a1: np.ndarray
    a2: np.ndarray
    a: np.ndarray
    lam: float = 0.0
    # autograd handle on ``a`` for the forward path
    weights: Tensor | None = field(default=None, repr=False)


def project_qkv(z: Tensor, p: DiffAttnParams, head: int):
    """Return ``(Q1, Q2, K1, K2, V)`` for one head, each ``(L, D')``."""
    if z.ndim != 2 or z.shape[1] != p.d_model:
        raise ag.ShapeError(f"input width {z.shape} does not match model width {p.d_model}")
    if not 0 <= head < p.n_heads:
        raise IndexError(f"head {head} out of range for {p.n_heads} heads")
    hd = p.head_dim
    q = z @ p.w_q[:, 2 * head * hd : 2 * (head + 1) * hd]
    k = z @ p.w_k[:, 2 * head * hd : 2 * (head + 1) * hd]
    v = z @ p.w_v[:, head * hd : (head + 1) * hd]
    return q[:, :hd], q[:, hd:], k[:, :hd], k[:, hd:], v


def diff_weights(q1: Tensor, k1: Tensor, q2: Tensor, k2: Tensor, lam: float, d: int) -> AttentionTrace:
    if q1.shape != q2.shape or k1.shape != k2.shape or q1.shape[1] != k1.shape[1]:
        raise ag.ShapeError(f"query/key shapes disagree: {q1.shape}, {q2.shape}, {k1.shape}, {k2.shape}")
    inv = 1.0 / math.sqrt(d)
    a1 = ag.softmax(ag.scale(q1 @ k1.T, inv))
    a2 = ag.softmax(ag.scale(q2 @ k2.T, inv))
    a = a1 if lam == 0 else ag.sub(a1, ag.scale(a2, lam))
    return AttentionTrace(a1.data, a2.data, a.data, lam, weights=a)


def diff_head(z: Tensor, p: DiffAttnParams, head: int, trace: list | None = None) -> Tensor:
    """``LayerNorm(Diff(Z) V)`` for one head, no affine."""
    q1, q2, k1, k2, v = project_qkv(z, p, head)
    tr = diff_weights(q1, k1, q2, k2, p.lam, p.d)
    if trace is not None:
        trace.append(tr)
    return ag.layer_norm(tr.weights @ v)


def multi_head_diff(z: Tensor, p: DiffAttnParams, trace: list | None = None) -> Tensor:
    heads = [diff_head(z, p, i, trace) for i in range(p.n_heads)]
    cat = heads[0] if len(heads) == 1 else ag.concat(heads, axis=1)
    return cat @ p.w_o


def standard_multi_head(z: Tensor, p: DiffAttnParams) -> Tensor:
    """Ordinary single-softmax attention on ``(Q1, K1, V)`` with the same per-head norm.

    Written without reference to :func:`diff_weights`; used as the lambda = 0
    reference.
    """
    hd = p.head_dim
    heads = []
    for i in range(p.n_heads):
        q = z @ p.w_q[:, 2 * i * hd : 2 * i * hd + hd]
        k = z @ p.w_k[:, 2 * i * hd : 2 * i * hd + hd]
        v = z @ p.w_v[:, i * hd : (i + 1) * hd]
        att = ag.softmax(ag.scale(q @ k.T, 1.0 / math.sqrt(p.d)))
        heads.append(ag.layer_norm(att @ v))
    return ag.concat(heads, axis=1) @ p.w_o
