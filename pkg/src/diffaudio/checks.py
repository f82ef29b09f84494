"""Finite-difference gradient checks over the model's building blocks."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .attention import DiffAttnParams, multi_head_diff
from .autograd import Tensor, grad_check
from .config import RunConfig
from .decoder import DecoderConfig, DecoderParams, decode
from .encoder import EncoderParams, encoder_layer
from .masking import block_mask
from .model import PretrainModel, encoder_config

GRADCHECK_TOL = 1e-5


def _weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    # a generic scalar readout so every output coordinate carries a distinct weight
    return ag.sum_(ag.mul(x, Tensor(w)))


def check_attention(cfg: RunConfig, rng: np.random.Generator, n_tokens: int = 6, max_coords: int | None = 24) -> float:
    p = DiffAttnParams.init(cfg.d_model, cfg.n_heads, cfg.lam, rng, cfg.scale_dim)
    z = Tensor(rng.standard_normal((n_tokens, cfg.d_model)))
    w = rng.standard_normal((n_tokens, cfg.d_model))

    def f(z_, *_):
        return _weighted_sum(multi_head_diff(z_, p), w)

    return grad_check(f, [z, *p.parameters().values()], 1e-5, max_coords, rng)


def check_encoder_layer(cfg: RunConfig, rng: np.random.Generator, n_tokens: int = 6, max_coords: int | None = 16) -> float:
    lp = EncoderParams.init(encoder_config(cfg), rng).layers[0]
    x = Tensor(rng.standard_normal((n_tokens, cfg.d_model)))
    w = rng.standard_normal((n_tokens, cfg.d_model))

    def f(x_, *_):
        return _weighted_sum(encoder_layer(x_, lp), w)

    return grad_check(f, [x, *lp.parameters().values()], 1e-5, max_coords, rng)


def check_decoder(cfg: RunConfig, rng: np.random.Generator, grid=(3, 8), max_coords: int | None = 16) -> float:
    dp = DecoderParams.init(
        DecoderConfig(cfg.d_model, cfg.decoder_layers, cfg.decoder_kernel, cfg.decoder_groups, cfg.d_model), rng
    )
    g = Tensor(rng.standard_normal((cfg.d_model, *grid)))
    w = rng.standard_normal((grid[0] * grid[1], cfg.d_model))

    def f(g_, *_):
        return _weighted_sum(decode(g_, dp), w)

    return grad_check(f, [g, *dp.parameters().values()], 1e-5, max_coords, rng)


def check_total_loss(cfg: RunConfig, rng: np.random.Generator, n_frames: int = 32, max_coords: int | None = 6) -> float:
    """Composed utterance + frame loss of one masked clone, w.r.t. every student parameter."""
    model = PretrainModel(cfg, rng)
    # perturb the teacher away from the student so targets are not a fixed point
    for t in model.teacher.params.values():
        t.data += 0.05 * rng.standard_normal(t.shape)
    frames = rng.standard_normal((n_frames, cfg.n_mels))
    targets = model.targets(frames)
    plan = block_mask(targets.shape[0], 0.5, 2, int(rng.integers(1 << 31)))
    params = list(model.parameters().values())

    def f(*_):
        return model.clone_loss(frames, plan, targets)[0]

    return grad_check(f, params, 1e-5, max_coords, rng)


def run_suite(cfg: RunConfig, seed: int = 0, thorough: bool = False) -> dict[str, float]:
    """Max relative error of each check; ``thorough`` perturbs every coordinate of the small blocks."""
    rng = np.random.default_rng(seed)
    full = None if thorough else 24
    return {
        "diff_attention": check_attention(cfg, rng, max_coords=full),
        "encoder_layer": check_encoder_layer(cfg, rng, max_coords=full and 16),
        "decoder": check_decoder(cfg, rng, max_coords=full and 16),
        "total_loss": check_total_loss(cfg, rng),
    }
