"""Optimal-transport conditional flow matching.

Tensors are frame-major, ``[..., T, n_mels]``. The vector field is any
callable ``net(x_t, t, h, f_T)``; :class:`VectorFieldNet` is the trainable
one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


class DivergedError(FloatingPointError):
    def __init__(self, msg="diverged", step=None):
        super().__init__(msg if step is None else f"{msg} at step {step}")
        self.step = step


@dataclass(frozen=True)
class FlowSchedule:
    sigma_min: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.sigma_min <= 1.0:
            raise ValueError("sigma_min must lie in [0, 1]")


def _time_like(t, x: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-item time against ``x``; rejects t outside [0, 1]."""
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    if bool(((t < 0) | (t > 1)).any()) or not bool(torch.isfinite(t).all()):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


def ot_flow(t, z: torch.Tensor, x: torch.Tensor, sched: FlowSchedule = FlowSchedule()) -> torch.Tensor:
    """Straight path ``t*z + (1 - (1 - sigma_min) t) x``."""
    if z.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(x.shape)}")
    t = _time_like(t, x)
    return t * z + (1 - (1 - sched.sigma_min) * t) * x


def target_vector(x0: torch.Tensor, x1: torch.Tensor, sched: FlowSchedule = FlowSchedule()) -> torch.Tensor:
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    return x1 - (1 - sched.sigma_min) * x0


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over valid frames; ``mask`` is [..., T]."""
    sq = (pred - target) ** 2
    if mask is None:
        return sq.mean()
    m = mask.to(sq.dtype).unsqueeze(-1)
    return (sq * m).sum() / (m.sum() * sq.shape[-1])


def cfm_loss(
    net,
    x1: torch.Tensor,
    h,
    f_T,
    rng: np.random.Generator,
    sched: FlowSchedule = FlowSchedule(),
    mask: torch.Tensor | None = None,
    x0: torch.Tensor | None = None,
) -> torch.Tensor:
    """Flow-matching regression loss for one draw of (t, x0).

    With a leading batch axis (``x1.ndim == 3``) every item gets its own t.
    Passing ``x0`` pins the noise, which leaves only t random.
    """
    batched = x1.ndim == 3
    n_t = x1.shape[0] if batched else None
    t = torch.as_tensor(rng.uniform(0.0, 1.0, size=n_t), dtype=x1.dtype)
    if x0 is None:
        x0 = torch.as_tensor(rng.standard_normal(tuple(x1.shape)), dtype=x1.dtype)
    x0 = x0.expand_as(x1)
    if mask is not None:
        x0 = x0 * mask.unsqueeze(-1)
    x_t = ot_flow(t, x1, x0, sched)
    pred = net(x_t, t, h, f_T)
    if not bool(torch.isfinite(pred).all()):
        raise DivergedError()
    return masked_mse(pred, target_vector(x0, x1, sched), mask)


@torch.no_grad()
def euler_sample(
    net,
    h,
    f_T,
    steps: int,
    rng: np.random.Generator,
    shape: tuple | None = None,
    x0: torch.Tensor | None = None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Integrate the learned ODE from Gaussian noise with ``steps`` explicit Euler steps.

    ``shape`` defaults to ``h``'s frame count by ``net.n_mels``. Uses the left
    end point of each interval, ``t_k = k / steps``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if x0 is None:
        if shape is None:
            shape = tuple(h.shape[:-1]) + (net.n_mels,)
        x0 = torch.as_tensor(rng.standard_normal(shape), dtype=dtype)
    x = x0.clone()
    dt = 1.0 / steps
    for k in range(steps):
        x = x + dt * net(x, k / steps, h, f_T)
        if not bool(torch.isfinite(x).all()):
            raise DivergedError(step=k)
    return x


def vector_field_forward(x_t, t, h, f_T, net) -> torch.Tensor:
    if h is not None and h.shape[-2] != x_t.shape[-2]:
        raise ValueError(f"frame mismatch: x_t has {x_t.shape[-2]}, h has {h.shape[-2]}")
    return net(x_t, t, h, f_T)


# ----------------------------------------------------------------------------
# network


def timestep_embedding(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = scale * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ChannelNorm(nn.Module):
    """LayerNorm over channels of a [B, C, T] tensor; frame-local, so padding never leaks."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class ResBlock1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = ChannelNorm(c_in)
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = ChannelNorm(c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb, mask):
        h = self.conv1(F.silu(self.norm1(x)) * mask)
        h = h + self.emb(emb)[:, :, None]
        h = self.conv2(F.silu(self.norm2(h)) * mask)
        return (h + self.skip(x)) * mask


class VectorFieldNet(nn.Module):
    """1-D UNet over mel frames: two down and two up stages with skips.

    The conditioning sequence is concatenated with ``x_t`` channel-wise at the
    input; timestep and timbre embeddings are summed and injected into every
    residual block. Two linear read-outs are added to the UNet output: a
    per-bin gain on ``x_t`` and a frame-wise projection of the conditioning,
    each scaled by a function of the embedding. For a memorised target the
    exact field is affine in ``x_t`` and the data, so these shortcuts let the
    network reach it without routing everything through the UNet. Both start
    at zero. Every activation is re-masked before each convolution, so
    valid outputs do not depend on how much right padding a batch carries.
    """

    def __init__(
        self,
        n_mels: int = 80,
        cond_dim: int = 256,
        timbre_dim: int = 576,
        channels: tuple = (128, 256),
        time_dim: int = 128,
    ):
        super().__init__()
        c0, c1 = channels
        self.n_mels = n_mels
        self.time_dim = time_dim
        emb = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.timbre = nn.Linear(timbre_dim, emb)
        self.inp = nn.Conv1d(n_mels + cond_dim, c0, 3, padding=1)
        self.down1 = ResBlock1d(c0, c0, emb)
        self.pool1 = nn.Conv1d(c0, c0, 3, stride=2, padding=1)
        self.down2 = ResBlock1d(c0, c1, emb)
        self.pool2 = nn.Conv1d(c1, c1, 3, stride=2, padding=1)
        self.mid = ResBlock1d(c1, c1, emb)
        self.up2 = ResBlock1d(c1 + c1, c1, emb)
        self.up1 = ResBlock1d(c1 + c0, c0, emb)
        self.out_norm = ChannelNorm(c0)
        self.out = nn.Conv1d(c0, n_mels, 1)
        self.skip_gain = nn.Linear(emb, n_mels)
        self.cond_head = nn.Linear(cond_dim, n_mels)
        self.cond_gain = nn.Linear(emb, n_mels)
        for layer in (self.skip_gain, self.cond_head, self.cond_gain):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    @staticmethod
    def _up(x, like):
        return x.repeat_interleave(2, dim=-1)[..., : like.shape[-1]]

    def forward(self, x_t, t, h, f_T, mask=None):
        """``x_t`` [B, T, n_mels], ``h`` [B, T, cond], ``f_T`` [B, timbre], ``t`` scalar or [B]."""
        squeeze = x_t.ndim == 2
        if squeeze:
            x_t, h, f_T = x_t[None], h[None], f_T[None]
        if h.shape[-2] != x_t.shape[-2]:
            raise ValueError(f"frame mismatch: x_t has {x_t.shape[-2]}, h has {h.shape[-2]}")
        B, T, _ = x_t.shape
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1).expand(B)
        m0 = torch.ones(B, 1, T, dtype=x_t.dtype) if mask is None else mask.to(x_t.dtype)[:, None, :]
        m1 = m0[..., ::2]
        m2 = m1[..., ::2]

        emb = self.time_mlp(timestep_embedding(t, self.time_dim)) + self.timbre(f_T)
        x = torch.cat([x_t, h], dim=-1).transpose(1, 2) * m0
        x = self.inp(x) * m0
        s1 = self.down1(x, emb, m0)
        x = self.pool1(s1) * m1
        s2 = self.down2(x, emb, m1)
        x = self.pool2(s2) * m2
        x = self.mid(x, emb, m2)
        x = self.up2(torch.cat([self._up(x, s2) * m1, s2], dim=1), emb, m1)
        x = self.up1(torch.cat([self._up(x, s1) * m0, s1], dim=1), emb, m0)
        out = (self.out(F.silu(self.out_norm(x))) * m0).transpose(1, 2)
        cond = self.cond_head(h) * m0.transpose(1, 2)
        out = out + self.skip_gain(emb)[:, None, :] * x_t + (1 + self.cond_gain(emb)[:, None, :]) * cond
        return out[0] if squeeze else out
