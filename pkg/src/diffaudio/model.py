"""Student/teacher backbones, the pretraining model and the fine-tuning classifier."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import RunConfig
from .decoder import DecoderConfig, DecoderParams, decode, tokens_to_grid
from .encoder import EncoderConfig, EncoderOutputs, EncoderParams, cls_index, encode, prepend_cls
from .frontend import pad_to_patches, patch_matrix, patchify_and_embed, sinusoidal_pos_enc
from .masking import MaskPlan, gather_visible, scatter_with_mask_token
from .objective import LossBreakdown, TeacherState, frame_loss, teacher_targets, total_loss, utterance_loss


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    return EncoderConfig(
        n_layers=cfg.n_layers,
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        lam=cfg.lam,
        ffn_hidden=cfg.ffn_hidden,
        cls_position=cfg.cls_position,
        final_norm=cfg.final_norm,
        scale_dim=cfg.scale_dim,
    )


def sequence_positions(n_patches: int, cls_position: str) -> tuple[int, np.ndarray]:
    """Positional index of the CLS row and of each patch token in the full sequence."""
    c = cls_index(n_patches, cls_position)
    idx = np.arange(n_patches)
    return c, np.where(idx >= c, idx + 1, idx)


@dataclass
class Embedded:
    tokens: Tensor  # (N, D) patch tokens with positions added
    cls: Tensor  # (1, D) CLS with its position added
    pos: np.ndarray  # (N, D) positional code of each patch slot
    grid_h: int
    grid_w: int
    cls_row: int  # CLS row in the full (unmasked) sequence


class Backbone:
    """Patch projection, optional front conv, CLS token and encoder stack."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        p2 = cfg.patch * cfg.patch
        self.patch_proj = Tensor(rng.normal(0.0, 1.0 / math.sqrt(p2), (p2, cfg.d_model)), requires_grad=True)
        self.front_w = self.front_b = None
        if cfg.front_conv:
            w = np.zeros((1, 1, 3, 3))
            w[0, 0, 1, 1] = 1.0
            self.front_w = Tensor(w, requires_grad=True)
            self.front_b = Tensor(np.zeros(1), requires_grad=True)
        self.encoder = EncoderParams.init(encoder_config(cfg), rng)

    def parameters(self) -> dict[str, Tensor]:
        out = {"patch_proj": self.patch_proj}
        if self.front_w is not None:
            out["front_conv.w"] = self.front_w
            out["front_conv.b"] = self.front_b
        out.update({f"encoder.{k}": v for k, v in self.encoder.parameters().items()})
        return out

    def frozen_copy(self) -> "Backbone":
        twin = copy.deepcopy(self)
        for t in twin.parameters().values():
            t.requires_grad = False
            t.grad = None
        return twin

    def embed(self, frames: np.ndarray) -> Embedded:
        front = (self.front_w, self.front_b) if self.front_w is not None else None
        pe = patchify_and_embed(frames, self.patch_proj, self.cfg.patch, front)
        n = pe.n_tokens
        c, pos_idx = sequence_positions(n, self.cfg.cls_position)
        table = sinusoidal_pos_enc(n + 1, self.cfg.d_model)
        pos = table[pos_idx]
        tokens = pe.tokens + Tensor(pos)
        cls = self.encoder.cls + Tensor(table[c : c + 1])
        return Embedded(tokens, cls, pos, pe.grid_h, pe.grid_w, c)

    def encode_full(self, emb: Embedded, keep_traces: bool = False) -> EncoderOutputs:
        x = prepend_cls(emb.tokens, emb.cls, self.cfg.cls_position)
        return encode(x, self.encoder, keep_traces)

    def encode_visible(self, emb: Embedded, plan: MaskPlan) -> tuple[Tensor, Tensor, EncoderOutputs]:
        """Encode the visible tokens; returns (CLS output (1,D), visible outputs, raw outputs)."""
        vis = gather_visible(emb.tokens, plan)
        x = prepend_cls(vis, emb.cls, self.cfg.cls_position)
        out = encode(x, self.encoder)
        c = cls_index(vis.shape[0], self.cfg.cls_position)
        rows = np.delete(np.arange(x.shape[0]), c)
        return out.final[c : c + 1], ag.take_rows(out.final, rows), out


class PretrainModel:
    """Student backbone + mask embedding + CNN decoder, with an EMA teacher backbone."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.student = Backbone(cfg, rng)
        self.mask_emb = Tensor(rng.normal(0.0, 0.02, (1, cfg.d_model)), requires_grad=True)
        width = cfg.d_model if cfg.target_mode == "feature" else cfg.patch * cfg.patch
        self.decoder = DecoderParams.init(
            DecoderConfig(cfg.d_model, cfg.decoder_layers, cfg.decoder_kernel, cfg.decoder_groups, width), rng
        )
        self.teacher_net = self.student.frozen_copy()
        self.teacher = TeacherState(self.teacher_net.parameters(), cfg.tau)
        self.teacher_forwards = 0

    def parameters(self) -> dict[str, Tensor]:
        out = {f"student.{k}": v for k, v in self.student.parameters().items()}
        out["mask_emb"] = self.mask_emb
        out.update({f"decoder.{k}": v for k, v in self.decoder.parameters().items()})
        return out

    def state_tensors(self) -> dict[str, Tensor]:
        """Everything worth checkpointing: trainable parameters plus the teacher."""
        out = dict(self.parameters())
        out.update({f"teacher.{k}": v for k, v in self.teacher.params.items()})
        return out

    def targets(self, frames: np.ndarray) -> np.ndarray:
        """Layer-averaged teacher features ``(N, D)`` for one utterance (no gradient).

        These feed the utterance loss in every mode and the frame loss in
        feature mode.
        """
        self.teacher_forwards += 1
        emb = self.teacher_net.embed(frames)
        out = self.teacher_net.encode_full(emb)
        return teacher_targets(out, cls_row=emb.cls_row, normalize=self.cfg.target_norm)

    def pixel_targets(self, frames: np.ndarray) -> np.ndarray:
        pm = patch_matrix(pad_to_patches(np.asarray(frames, dtype=np.float64), self.cfg.patch), self.cfg.patch)
        if self.cfg.target_norm:
            pm = (pm - pm.mean(axis=1, keepdims=True)) / np.sqrt(pm.var(axis=1, keepdims=True) + 1e-6)
        return pm

    def clone_loss(self, frames: np.ndarray, plan: MaskPlan, feat_targets: np.ndarray, emb=None):
        """Student forward on one masked view; returns (total, utterance, frame) tensors."""
        emb = emb or self.student.embed(frames)
        cls_out, vis_out, _ = self.student.encode_visible(emb, plan)
        full = scatter_with_mask_token(vis_out, plan, self.mask_emb, emb.pos)
        pred = decode(tokens_to_grid(full, emb.grid_h, emb.grid_w), self.decoder)
        frame_tgt = feat_targets if self.cfg.target_mode == "feature" else self.pixel_targets(frames)
        u = utterance_loss(cls_out, feat_targets)
        f = frame_loss(pred, frame_tgt, plan, self.cfg.frame_loss_mode)
        return total_loss(u, f, self.cfg.alpha), u, f


class Classifier:
    """Fine-tuning model: a backbone plus a zero-initialized linear head on the CLS output."""

    def __init__(self, backbone: Backbone, n_classes: int):
        if n_classes < 2:
            raise ValueError("a classifier needs at least two classes")
        self.backbone = backbone
        self.cfg = backbone.cfg
        self.n_classes = n_classes
        d = backbone.cfg.d_model
        self.head_w = Tensor(np.zeros((d, n_classes)), requires_grad=True)
        self.head_b = Tensor(np.zeros(n_classes), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.parameters().items()}
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def state_tensors(self) -> dict[str, Tensor]:
        return self.parameters()

    def logits(self, frames: np.ndarray, plan: MaskPlan | None = None) -> Tensor:
        emb = self.backbone.embed(frames)
        if plan is None:
            out = self.backbone.encode_full(emb)
            cls_out = out.final[emb.cls_row : emb.cls_row + 1]
        else:
            cls_out, _, _ = self.backbone.encode_visible(emb, plan)
        return cls_out @ self.head_w + self.head_b

    def predict_scores(self, batch: list[np.ndarray]) -> np.ndarray:
        return np.concatenate([self.logits(f).data for f in batch], axis=0)


def mean_breakdown(parts: list[tuple[float, float, float]], alpha: float) -> LossBreakdown:
    arr = np.asarray(parts, dtype=np.float64)
    t, u, f = arr.mean(axis=0)
    return LossBreakdown(utterance=float(u), frame=float(f), total=float(t), alpha=alpha)
