"""Content-aware timbre ensemble.

Speaker embeddings from several providers are scaled by learnable weights
and concatenated into a global timbre vector. Content frames then attend
over one token per provider through a stack of pre-norm cross-attention
blocks, and a projection of the global timbre vector is added to every
output frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


@dataclass(frozen=True)
class CrossAttentionConfig:
    n_blocks: int = 6
    n_heads: int = 4
    model_dim: int = 256
    ffn_dim: int = 1024

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")


def ada_fusion(embeddings: Sequence, weights) -> torch.Tensor:
    """Concatenate ``w_i * e_i`` in registration order.

    Accepts TimbreEmbedding objects, arrays or tensors (optionally batched
    along leading axes).
    """
    weights = weights if isinstance(weights, torch.Tensor) else torch.as_tensor(weights, dtype=torch.float64)
    if len(embeddings) != weights.shape[0]:
        raise ValueError(f"{len(embeddings)} embeddings but {weights.shape[0]} fusion weights")
    parts = []
    for i, e in enumerate(embeddings):
        e = getattr(e, "vector", e)
        e = e if isinstance(e, torch.Tensor) else torch.as_tensor(np.asarray(e), dtype=weights.dtype)
        parts.append(weights[i] * e)
    return torch.cat(parts, dim=-1)


class AdaFusion(nn.Module):
    def __init__(self, n_providers: int):
        super().__init__()
        self.weights = nn.Parameter(torch.ones(n_providers))

    def forward(self, embeddings: Sequence[torch.Tensor]) -> torch.Tensor:
        return ada_fusion(embeddings, self.weights)


class TimbreTokens(nn.Module):
    """Split the global timbre vector back per provider and project each piece to one token."""

    def __init__(self, dims: Sequence[int], model_dim: int):
        super().__init__()
        self.dims = tuple(dims)
        self.proj = nn.ModuleList(nn.Linear(d, model_dim) for d in self.dims)

    def forward(self, f_T: torch.Tensor) -> torch.Tensor:
        if f_T.shape[-1] != sum(self.dims):
            raise ValueError(f"global timbre has {f_T.shape[-1]} dims, expected {sum(self.dims)}")
        segments = torch.split(f_T, self.dims, dim=-1)
        return torch.stack([p(s) for p, s in zip(self.proj, segments)], dim=-2)


class CrossAttentionBlock(nn.Module):
    """Pre-norm block: x + Attn(LN(x), LN(kv)), then x + FFN(LN(x)).

    The output projection has no bias so zeroed value weights silence the
    attention branch entirely.
    """

    def __init__(self, model_dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm_q = nn.LayerNorm(model_dim)
        self.norm_kv = nn.LayerNorm(model_dim)
        self.q = nn.Linear(model_dim, model_dim)
        self.k = nn.Linear(model_dim, model_dim)
        self.v = nn.Linear(model_dim, model_dim)
        self.o = nn.Linear(model_dim, model_dim, bias=False)
        self.norm_ffn = nn.LayerNorm(model_dim)
        self.ffn1 = nn.Linear(model_dim, ffn_dim)
        self.ffn2 = nn.Linear(ffn_dim, model_dim)

    def attention(self, x: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        *lead, T, d = x.shape
        N = kv.shape[-2]
        H, dh = self.n_heads, d // self.n_heads
        q = self.q(self.norm_q(x)).reshape(*lead, T, H, dh).transpose(-3, -2)
        kvn = self.norm_kv(kv)
        k = self.k(kvn).reshape(*lead, N, H, dh).transpose(-3, -2)
        v = self.v(kvn).reshape(*lead, N, H, dh).transpose(-3, -2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        return self.o((w @ v).transpose(-3, -2).reshape(*lead, T, d))

    def ffn(self, x: torch.Tensor) -> torch.Tensor:
        return self.ffn2(F.gelu(self.ffn1(self.norm_ffn(x))))

    def forward(self, x: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != kv.shape[-1]:
            raise ValueError(f"query dim {x.shape[-1]} != key/value dim {kv.shape[-1]}")
        x = x + self.attention(x, kv)
        return x + self.ffn(x)


def cross_attention_block(query_seq: torch.Tensor, kv_seq: torch.Tensor, block: CrossAttentionBlock) -> torch.Tensor:
    return block(query_seq, kv_seq)


class CTE(nn.Module):
    def __init__(self, content_dim: int, sv_dims: Sequence[int], cfg: CrossAttentionConfig = CrossAttentionConfig()):
        super().__init__()
        self.cfg = cfg
        self.sv_dims = tuple(sv_dims)
        self.fusion = AdaFusion(len(self.sv_dims))
        self.content_in = nn.Linear(content_dim, cfg.model_dim)
        self.tokens = TimbreTokens(self.sv_dims, cfg.model_dim)
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(cfg.model_dim, cfg.n_heads, cfg.ffn_dim) for _ in range(cfg.n_blocks)
        )
        self.timbre_proj = nn.Linear(sum(self.sv_dims), cfg.model_dim)

    def fuse(self, embeddings: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.fusion(embeddings)

    def forward(self, f_C: torch.Tensor, f_T: torch.Tensor) -> torch.Tensor:
        """``f_C`` [..., T1, D] content frames, ``f_T`` [..., sum(d_i)] -> [..., T1, model_dim]."""
        kv = self.tokens(f_T)
        x = self.content_in(f_C)
        for block in self.blocks:
            x = block(x, kv)
        return x + self.timbre_proj(f_T).unsqueeze(-2)


def cte_forward(f_C, f_T, cte: CTE) -> torch.Tensor:
    return cte(f_C, f_T)
