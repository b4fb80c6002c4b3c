"""Timbre similarity loss, the joint objective and the SECS metric.

All functions accept numpy arrays or torch tensors and operate over the last
axis, so they batch naturally and stay differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch


@dataclass(frozen=True)
class SSIMConstants:
    c1: float = 0.01
    c2: float = 0.03

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("SSIM constants must be positive")


@dataclass(frozen=True)
class LossWeights:
    lambda_tim: float = 0.05

    def __post_init__(self):
        if self.lambda_tim < 0:
            raise ValueError("lambda_tim must be non-negative")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def ssim(a, b, k: SSIMConstants = SSIMConstants()) -> torch.Tensor:
    """Global SSIM between two 1-D signals with population moments.

    >>> round(float(ssim([0.0, 1.0], [1.0, 0.0])), 6)
    -0.886792
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] < 2:
        raise ValueError("ssim needs at least 2 elements")
    mu_a, mu_b = a.mean(dim=-1), b.mean(dim=-1)
    da, db = a - mu_a.unsqueeze(-1), b - mu_b.unsqueeze(-1)
    var_a, var_b = (da * da).mean(dim=-1), (db * db).mean(dim=-1)
    cov = (da * db).mean(dim=-1)
    luminance = (2 * mu_a * mu_b + k.c1) / (mu_a**2 + mu_b**2 + k.c1)
    structure = (2 * cov + k.c2) / (var_a + var_b + k.c2)
    return luminance * structure


def timbre_loss(ref_embs: Sequence, conv_embs: Sequence, k: SSIMConstants = SSIMConstants()) -> torch.Tensor:
    """Negative sum of per-provider SSIM between reference and converted embeddings."""
    if len(ref_embs) != len(conv_embs):
        raise ValueError(f"{len(ref_embs)} reference vs {len(conv_embs)} converted embeddings")
    if not ref_embs:
        raise ValueError("no embeddings")
    return -sum(ssim(r, c, k) for r, c in zip(ref_embs, conv_embs))


def total_loss(l_cfm, l_tim, w: LossWeights = LossWeights()):
    return l_cfm + w.lambda_tim * l_tim


def secs(a, b) -> torch.Tensor:
    """Cosine similarity between speaker embeddings."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any() or (nb == 0).any()):
        raise ValueError("zero-norm embedding")
    return (a * b).sum(dim=-1) / (na * nb)
