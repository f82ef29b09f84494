"""Pre-norm differential transformer encoder with a learnable CLS token."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .attention import DiffAttnParams, multi_head_diff
from .autograd import Tensor


@dataclass
class EncoderConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    lam: float = 0.3
    ffn_hidden: int | None = None
    cls_position: str = "head"
    final_norm: bool = True
    scale_dim: int | None = None

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("encoder needs at least one layer")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.cls_position not in ("head", "middle"):
            raise ValueError(f"cls_position must be 'head' or 'middle', got {self.cls_position!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


@dataclass
class LayerParams:
    attn: DiffAttnParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator, zero_out: bool = False) -> "LayerParams":
        d, hdn = cfg.d_model, cfg.ffn_hidden
        return cls(
            attn=DiffAttnParams.init(d, cfg.n_heads, cfg.lam, rng, cfg.scale_dim, zero_out=zero_out),
            ln1_g=_param(np.ones(d)),
            ln1_b=_param(np.zeros(d)),
            ln2_g=_param(np.ones(d)),
            ln2_b=_param(np.zeros(d)),
            ffn_w1=_param(rng.normal(0.0, 1.0 / math.sqrt(d), (d, hdn))),
            ffn_b1=_param(np.zeros(hdn)),
            ffn_w2=_param(np.zeros((hdn, d)) if zero_out else rng.normal(0.0, 1.0 / math.sqrt(hdn), (hdn, d))),
            ffn_b2=_param(np.zeros(d)),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {f"attn.{k}": v for k, v in self.attn.parameters().items()}
        for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            out[name] = getattr(self, name)
        return out


@dataclass
class EncoderParams:
    cfg: EncoderConfig
    cls: Tensor
    layers: list[LayerParams]
    norm_g: Tensor
    norm_b: Tensor

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator | None = None, zero_out: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        d = cfg.d_model
        return cls(
            cfg=cfg,
            cls=_param(rng.normal(0.0, 0.02, (1, d))),
            layers=[LayerParams.init(cfg, rng, zero_out) for _ in range(cfg.n_layers)],
            norm_g=_param(np.ones(d)),
            norm_b=_param(np.zeros(d)),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {"cls": self.cls}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.parameters().items()})
        out["norm_g"] = self.norm_g
        out["norm_b"] = self.norm_b
        return out


@dataclass
class EncoderOutputs:
    per_layer: list[Tensor]  # each (N, D), CLS row included
    final: Tensor  # last layer after the optional final layer-norm
    traces: list = field(default_factory=list)


def cls_index(n_tokens: int, position: str = "head") -> int:
    """Row the CLS token occupies after insertion into ``n_tokens`` patch tokens."""
    return 0 if position == "head" else n_tokens // 2


def prepend_cls(tokens: Tensor, cls: Tensor, position: str = "head") -> Tensor:
    """Insert ``cls`` (1, D) at row 0 (head) or row floor(T/2) (middle)."""
    n = tokens.shape[0]
    if n == 0:
        return cls
    at = cls_index(n, position)
    parts = [tokens[:at], cls, tokens[at:]] if at else [cls, tokens]
    return ag.concat([p for p in parts if p.shape[0] > 0], axis=0)


def encoder_layer(x: Tensor, lp: LayerParams, trace: list | None = None) -> Tensor:
    h = x + multi_head_diff(ag.layer_norm(x, lp.ln1_g, lp.ln1_b), lp.attn, trace)
    f = ag.layer_norm(h, lp.ln2_g, lp.ln2_b) @ lp.ffn_w1 + lp.ffn_b1
    f = ag.gelu(f) @ lp.ffn_w2 + lp.ffn_b2
    return h + f


def encode(tokens: Tensor, params: EncoderParams, keep_traces: bool = False) -> EncoderOutputs:
    """Run every layer; ``tokens`` already contains the CLS row."""
    outs = []
    traces: list = []
    x = tokens
    for lp in params.layers:
        layer_trace = [] if keep_traces else None
        x = encoder_layer(x, lp, layer_trace)
        outs.append(x)
        if keep_traces:
            traces.append(layer_trace)
    final = ag.layer_norm(x, params.norm_g, params.norm_b) if params.cfg.final_norm else x
    return EncoderOutputs(outs, final, traces)
