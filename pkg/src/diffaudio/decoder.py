"""Shape-preserving grouped-convolution decoder over the patch grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class DecoderConfig:
    channels: int = 64
    n_layers: int = 6
    kernel: int = 3
    groups: int = 16
    target_width: int = 64

    def __post_init__(self):
        if self.channels % self.groups:
            raise ValueError(f"channels={self.channels} not divisible by groups={self.groups}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd to preserve spatial shape")

    def n_conv_params(self) -> int:
        """Grouped-conv weights plus biases of the six-layer stack (excluding the 1x1 head)."""
        c = self.channels
        return self.n_layers * ((c // self.groups) * c * self.kernel**2 + c)


@dataclass
class DecoderParams:
    cfg: DecoderConfig
    conv_w: list[Tensor]
    conv_b: list[Tensor]
    ln_g: list[Tensor]
    ln_b: list[Tensor]
    head_w: Tensor  # (target_width, channels, 1, 1)
    head_b: Tensor

    @classmethod
    def init(cls, cfg: DecoderConfig, rng: np.random.Generator | None = None) -> "DecoderParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        c, k = cfg.channels, cfg.kernel
        fan_in = (c // cfg.groups) * k * k

        def p(x):
            return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)

        return cls(
            cfg=cfg,
            conv_w=[p(rng.normal(0, 1 / math.sqrt(fan_in), (c, c // cfg.groups, k, k))) for _ in range(cfg.n_layers)],
            conv_b=[p(np.zeros(c)) for _ in range(cfg.n_layers)],
            ln_g=[p(np.ones(c)) for _ in range(cfg.n_layers)],
            ln_b=[p(np.zeros(c)) for _ in range(cfg.n_layers)],
            head_w=p(rng.normal(0, 1 / math.sqrt(c), (cfg.target_width, c, 1, 1))),
            head_b=p(np.zeros(cfg.target_width)),
        )

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i in range(self.cfg.n_layers):
            out[f"conv{i}.w"] = self.conv_w[i]
            out[f"conv{i}.b"] = self.conv_b[i]
            out[f"ln{i}.g"] = self.ln_g[i]
            out[f"ln{i}.b"] = self.ln_b[i]
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out


def tokens_to_grid(tokens: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """``(grid_h * grid_w, D)`` time-major tokens -> ``(D, grid_h, grid_w)``."""
    n, d = tokens.shape
    if n != grid_h * grid_w:
        raise ag.ShapeError(f"{n} tokens do not fill a {grid_h}x{grid_w} grid")
    return ag.reshape(ag.transpose(tokens), (d, grid_h, grid_w))


def grid_to_tokens(grid: Tensor) -> Tensor:
    d, h, w = grid.shape
    return ag.transpose(ag.reshape(grid, (d, h * w)))


def channel_layer_norm(grid: Tensor, gain: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Layer-norm across channels at each spatial site."""
    d, h, w = grid.shape
    return tokens_to_grid(ag.layer_norm(grid_to_tokens(grid), gain, bias), h, w)


def decode(grid: Tensor, params: DecoderParams) -> Tensor:
    """Conv -> channel LN -> GeLU, repeated, then a 1x1 projection; returns ``(n_tokens, target_width)``."""
    cfg = params.cfg
    if grid.ndim != 3 or grid.shape[0] != cfg.channels:
        raise ag.ShapeError(f"decoder expects ({cfg.channels}, H, W), got {grid.shape}")
    x = grid
    pad = cfg.kernel // 2
    for w, b, g, beta in zip(params.conv_w, params.conv_b, params.ln_g, params.ln_b):
        x = ag.conv2d(x, w, b, stride=1, padding=pad, groups=cfg.groups)
        x = ag.gelu(channel_layer_norm(x, g, beta))
    y = ag.conv2d(x, params.head_w, params.head_b)
    return grid_to_tokens(y)
