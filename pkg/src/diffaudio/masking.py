"""Block-wise random masking and the multi-clone student views.

Masks cover patch tokens only; the CLS row is inserted after masking, so it
can never be masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

# clone k of master seed s draws from SeedSequence([s, k])


@dataclass(frozen=True)
class MaskPlan:
    keep: np.ndarray  # bool per patch token, True = visible
    target_ratio: float
    block_size: int
    clone_id: int = 0

    @property
    def n_tokens(self) -> int:
        return self.keep.size

    @property
    def masked_fraction(self) -> float:
        return 1.0 - self.keep.mean() if self.keep.size else 0.0

    @property
    def visible_index(self) -> np.ndarray:
        return np.flatnonzero(self.keep)

    @property
    def masked_index(self) -> np.ndarray:
        return np.flatnonzero(~self.keep)


def _plan_from_rng(n_tokens: int, ratio: float, block_size: int, rng: np.random.Generator, clone_id: int) -> MaskPlan:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    if block_size < 1:
        raise ValueError("block_size must be at least 1")
    keep = np.ones(n_tokens, dtype=bool)
    need = math.ceil(ratio * n_tokens)
    masked = 0
    width = min(block_size, n_tokens)
    while masked < need:
        start = int(rng.integers(0, n_tokens - width + 1))
        keep[start : start + width] = False
        masked = n_tokens - int(keep.sum())
    keep.setflags(write=False)
    return MaskPlan(keep, ratio, block_size, clone_id)


def block_mask(n_tokens: int, ratio: float, block_size: int = 5, rng_seed: int = 0) -> MaskPlan:
    """Drop random contiguous blocks (overlap allowed) until ceil(ratio * n) tokens are masked."""
    return _plan_from_rng(n_tokens, ratio, block_size, np.random.default_rng(rng_seed), 0)


def clone_seed(seed: int, clone_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, clone_id])


def make_clones(n_tokens: int, ratio: float, block_size: int = 5, n_clones: int = 16, seed: int = 0) -> list[MaskPlan]:
    if n_clones < 1:
        raise ValueError("n_clones must be at least 1")
    if n_clones == 1:
        return [block_mask(n_tokens, ratio, block_size, seed)]
    return [
        _plan_from_rng(n_tokens, ratio, block_size, np.random.default_rng(clone_seed(seed, k)), k)
        for k in range(n_clones)
    ]


def _check(plan: MaskPlan, n: int) -> None:
    if plan.n_tokens != n:
        raise ag.ShapeError(f"mask plan covers {plan.n_tokens} tokens, input has {n}")


def gather_visible(tokens: Tensor, plan: MaskPlan) -> Tensor:
    """Visible rows in their original order."""
    _check(plan, tokens.shape[0])
    return ag.take_rows(tokens, plan.visible_index)


def scatter_with_mask_token(
    encoded_visible: Tensor,
    plan: MaskPlan,
    mask_embedding: Tensor,
    pos_enc: np.ndarray | None = None,
) -> Tensor:
    """Rebuild the full token grid, filling masked slots with ``mask_embedding`` + position code.

    ``pos_enc`` (n_tokens, D) holds the positional code of every patch slot;
    only its masked rows are used.
    """
    vis = plan.visible_index
    if encoded_visible.shape[0] != vis.size:
        raise ag.ShapeError(f"{encoded_visible.shape[0]} encoded rows for {vis.size} visible tokens")
    n = plan.n_tokens
    masked = plan.masked_index
    if masked.size == 0:
        return encoded_visible
    fill = ag.take_rows(mask_embedding, np.zeros(masked.size, dtype=np.int64))
    if pos_enc is not None:
        fill = fill + Tensor(pos_enc[masked])
    stacked = ag.concat([encoded_visible, fill], axis=0) if vis.size else fill
    # slot j takes row src[j] of ``stacked``
    src = np.empty(n, dtype=np.int64)
    src[vis] = np.arange(vis.size)
    src[masked] = vis.size + np.arange(masked.size)
    return ag.take_rows(stacked, src)
