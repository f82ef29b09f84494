"""Run configuration: one flat JSON-serializable record with presets.

Unknown keys are rejected when loading so that typos never silently fall
back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # encoder
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    lam: float = 0.3
    ffn_hidden: int | None = None
    cls_position: str = "head"
    final_norm: bool = True
    scale_dim: int | None = None
    # frontend
    patch: int = 16
    n_mels: int = 128
    n_fft: int = 512
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    fbank_normalize: bool = False
    front_conv: bool = False
    clip_seconds: float = 1.0
    # masking
    mask_ratio: float = 0.8
    finetune_mask_ratio: float = 0.2
    block_size: int = 5
    n_clones: int = 4
    # decoder and objective
    decoder_layers: int = 6
    decoder_kernel: int = 3
    decoder_groups: int = 16
    target_mode: str = "feature"
    frame_loss_mode: str = "masked_only"
    target_norm: bool = True
    alpha: float = 0.5
    tau: float = 0.999
    # optimisation
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    peak_lr: float = 2e-3
    finetune_lr: float | None = None
    warmup_epochs: float = 2.5
    total_epochs: float = 5.0
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        errs = []
        if self.n_heads < 1 or self.d_model % self.n_heads:
            errs.append(f"n_heads * head_dim must equal d_model ({self.n_heads} heads, d_model={self.d_model})")
        if self.d_model % 2:
            errs.append("d_model must be even for sinusoidal positions")
        if self.n_layers < 1:
            errs.append("n_layers must be >= 1")
        if self.lam < 0:
            errs.append("lam must be >= 0")
        if self.alpha < 0:
            errs.append("alpha must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            errs.append("tau must lie in [0, 1]")
        for name in ("mask_ratio", "finetune_mask_ratio"):
            if not 0.0 <= getattr(self, name) < 1.0:
                errs.append(f"{name} must lie in [0, 1)")
        if self.block_size < 1:
            errs.append("block_size must be >= 1")
        if self.n_clones < 1:
            errs.append("n_clones must be >= 1")
        if self.d_model % self.decoder_groups:
            errs.append(f"decoder_groups={self.decoder_groups} must divide d_model={self.d_model}")
        if self.cls_position not in ("head", "middle"):
            errs.append("cls_position must be 'head' or 'middle'")
        if self.target_mode not in ("feature", "pixel"):
            errs.append("target_mode must be 'feature' or 'pixel'")
        if self.frame_loss_mode not in ("masked_only", "all"):
            errs.append("frame_loss_mode must be 'masked_only' or 'all'")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            errs.append("beta1 and beta2 must lie in (0, 1)")
        if self.peak_lr <= 0:
            errs.append("peak_lr must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.total_epochs:
            errs.append("warmup_epochs must lie in [0, total_epochs]")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.n_mels % self.patch:
            errs.append("n_mels must be a multiple of patch")
        if errs:
            raise ConfigError("; ".join(errs))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ft_lr(self) -> float:
        return self.finetune_lr if self.finetune_lr is not None else self.peak_lr / 10

    def warmup_steps(self, total_steps: int) -> int:
        if self.total_epochs == 0:
            return 0
        return int(round(total_steps * self.warmup_epochs / self.total_epochs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, base: "RunConfig | None" = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return replace(base or cls(), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def updated(self, **kw) -> "RunConfig":
        return self.from_dict({k: v for k, v in kw.items() if v is not None}, self)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(data, base)


PRESETS: dict[str, RunConfig] = {
    "desk": RunConfig(finetune_lr=1e-3),
    "paper": RunConfig(
        d_model=768,
        n_heads=8,
        n_layers=12,
        lam=0.3,
        alpha=0.5,
        n_clones=16,
        total_epochs=20,
        warmup_epochs=2.5,
        batch_size=48,
        peak_lr=5e-4,
        clip_seconds=10.0,
    ),
}


def preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
