"""The full converter: timbre fusion + CTE conditioning + flow-matching vector field."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .cfm import FlowSchedule, VectorFieldNet
from .cte import CTE, CrossAttentionConfig


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    content_dim: int = 256
    sv_dims: tuple = (192, 192, 192)
    model_dim: int = 256
    n_heads: int = 4
    ffn_dim: int = 1024
    n_blocks: int = 6
    unet_channels: tuple = (128, 256)
    time_emb_dim: int = 128
    sigma_min: float = 1e-4
    # per-bin log-mel statistics (scalars broadcast); the flow runs on (mel - mel_mean) / mel_std
    mel_mean: tuple | float = 0.0
    mel_std: tuple | float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sv_dims", tuple(int(d) for d in self.sv_dims))
        object.__setattr__(self, "unet_channels", tuple(int(c) for c in self.unet_channels))
        if len(self.unet_channels) != 2:
            raise ValueError("unet_channels needs exactly two widths")
        for name in ("mel_mean", "mel_std"):
            v = getattr(self, name)
            if isinstance(v, (list, tuple)):
                if len(v) != self.n_mels:
                    raise ValueError(f"{name} needs {self.n_mels} entries")
                object.__setattr__(self, name, tuple(float(x) for x in v))
        if min(np.atleast_1d(self.mel_std)) <= 0:
            raise ValueError("mel_std must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sv_dims"] = list(self.sv_dims)
        d["unet_channels"] = list(self.unet_channels)
        for name in ("mel_mean", "mel_std"):
            if isinstance(d[name], tuple):
                d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class VoiceConverter(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.schedule = FlowSchedule(cfg.sigma_min)
        attn = CrossAttentionConfig(cfg.n_blocks, cfg.n_heads, cfg.model_dim, cfg.ffn_dim)
        self.cte = CTE(cfg.content_dim, cfg.sv_dims, attn)
        self.field = VectorFieldNet(
            cfg.n_mels, cfg.model_dim, sum(cfg.sv_dims), cfg.unet_channels, cfg.time_emb_dim
        )
        self.register_buffer("mel_mean", torch.tensor(cfg.mel_mean, dtype=torch.float64), persistent=False)
        self.register_buffer("mel_std", torch.tensor(cfg.mel_std, dtype=torch.float64), persistent=False)

    @property
    def n_mels(self) -> int:
        return self.cfg.n_mels

    def normalize(self, mel: torch.Tensor) -> torch.Tensor:
        return (mel - self.mel_mean.to(mel.dtype)) / self.mel_std.to(mel.dtype)

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.mel_std.to(x.dtype) + self.mel_mean.to(x.dtype)

    def condition(self, content: torch.Tensor, sv_embeddings) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (conditioning frames F, global timbre f_T)."""
        f_T = self.cte.fuse(sv_embeddings)
        return self.cte(content, f_T), f_T

    def velocity(self, x_t, t, h, f_T, mask=None) -> torch.Tensor:
        return self.field(x_t, t, h, f_T, mask)

    def forward(self, x_t, t, h, f_T, mask=None):
        return self.field(x_t, t, h, f_T, mask)
