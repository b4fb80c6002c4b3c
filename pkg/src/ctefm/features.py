"""Mel-spectrograms and the content / speaker-embedding providers.

Real deployments plug pretrained ASR and speaker-verification networks in
behind :class:`ContentProvider` and :class:`SpeakerProvider`. The synthetic
providers here are deterministic signal-processing stand-ins so the rest of
the system can be trained and checked without external weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch

from .audio import SAMPLE_RATE, Utterance

LOG_FLOOR = math.log(1e-5)


class UtteranceTooShort(ValueError):
    def __init__(self, n_samples: int, needed: int):
        super().__init__(f"utterance-too-short: {n_samples} samples, need at least {needed}")


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    f_min: float = 0.0
    f_max: float = SAMPLE_RATE / 2
    log_floor: float = LOG_FLOOR

    def __post_init__(self):
        if not self.n_fft >= self.win_length >= self.hop_length > 0:
            raise ValueError("need n_fft >= win_length >= hop_length > 0")


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # [n_frames, n_mels]
    hop_length: int = 256
    win_length: int = 1024

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: MelConfig, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """HTK-scale triangular filters with unit peak, shape [n_mels, n_fft // 2 + 1]."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2, cfg.n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def _window(cfg: MelConfig) -> np.ndarray:
    n = np.arange(cfg.win_length)
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / cfg.win_length)  # periodic Hann
    left = (cfg.n_fft - cfg.win_length) // 2
    return np.pad(win, (left, cfg.n_fft - cfg.win_length - left))


def compute_mel(utt: Utterance, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    """Log-mel magnitudes with center-padded framing.

    Produces ``len(samples) // hop_length + 1`` frames; entries are clamped
    at ``cfg.log_floor``.
    """
    x = utt.samples
    if x.size < cfg.win_length:
        raise UtteranceTooShort(x.size, cfg.win_length)
    pad = cfg.n_fft // 2
    x = np.pad(x, (pad, pad), mode="reflect")
    n_frames = 1 + (x.size - cfg.n_fft) // cfg.hop_length
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop_length][:n_frames]
    mag = np.abs(np.fft.rfft(frames * _window(cfg), axis=-1))
    mel = mag @ mel_filterbank(cfg, utt.sample_rate).T
    return MelSpectrogram(
        np.log(np.maximum(mel, math.exp(cfg.log_floor))), cfg.hop_length, cfg.win_length
    )


# ----------------------------------------------------------------------------
# content features


@dataclass(frozen=True)
class ContentFeatures:
    frames: np.ndarray  # [T1, D]
    frame_rate: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def align_frames(frames: np.ndarray, src_rate: float, n_target: int, target_rate: float) -> np.ndarray:
    """Linearly interpolate frame-major features onto another frame grid.

    Source frame ``t`` is centred at ``(t + 0.5) / src_rate`` seconds, target
    frame ``j`` at ``j / target_rate`` (center-padded mel framing). Ends clamp.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] == 1:
        return np.repeat(frames, n_target, axis=0)
    pos = np.arange(n_target) / target_rate * src_rate - 0.5
    pos = np.clip(pos, 0.0, frames.shape[0] - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, frames.shape[0] - 1)
    w = (pos - lo)[:, None]
    return (1.0 - w) * frames[lo] + w * frames[hi]


class ContentProvider(Protocol):
    id: str
    dim: int
    frame_rate: float

    def extract(self, utt: Utterance) -> ContentFeatures: ...


@dataclass(frozen=True)
class SyntheticContentProvider:
    """Timbre-normalised prosody features lifted to ``dim`` by fixed random features.

    Per 20 ms frame: loudness relative to the utterance peak, its slope,
    periodicity, and log-f0 relative to the utterance mean. None of these
    depend on the static spectral envelope, so the speaker is mostly
    invisible to the downstream model.
    """

    id: str = "synthetic-content"
    dim: int = 256
    frame_rate: float = 50.0
    seed: int = 0
    context: int = 2
    _lift: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n_in = 4 * (2 * self.context + 1)
        rng = np.random.default_rng([self.seed, 0xC0])
        w = rng.standard_normal((n_in, self.dim)) * (1.5 / math.sqrt(n_in))
        b = rng.standard_normal(self.dim) * 0.5
        object.__setattr__(self, "_lift", (w, b))

    @property
    def hop(self) -> int:
        return int(round(SAMPLE_RATE / self.frame_rate))

    def prosody(self, utt: Utterance) -> np.ndarray:
        """Raw per-frame [loudness, slope, periodicity, relative log-f0]."""
        hop = self.hop
        n = len(utt) // hop
        if n < 1:
            raise UtteranceTooShort(len(utt), hop)
        x = utt.samples[: n * hop]
        rms = np.sqrt(np.mean(x.reshape(n, hop) ** 2, axis=1))
        db = 20.0 * np.log10(rms + 1e-8)
        loud = np.clip((db - db.max()) / 60.0, -1.0, 0.0)
        slope = np.gradient(loud) if n > 1 else np.zeros(1)

        win = 2 * hop
        padded = np.pad(utt.samples, (hop // 2, win))
        frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop][:n]
        frames = frames - frames.mean(axis=1, keepdims=True)
        spec = np.fft.rfft(frames, n=4 * win, axis=1)
        ac = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, :win]
        ac = ac / np.maximum(ac[:, :1], 1e-12) * win / (win - np.arange(win))
        lo, hi = SAMPLE_RATE // 400, SAMPLE_RATE // 60
        lag = lo + np.argmax(ac[:, lo:hi], axis=1)
        period = np.clip(ac[np.arange(n), lag], 0.0, 1.0)
        voiced = (period > 0.5) & (loud > -0.5)
        logf0 = np.log(SAMPLE_RATE / lag)
        rel_f0 = np.zeros(n)
        if voiced.any():
            rel_f0[voiced] = 4.0 * (logf0[voiced] - logf0[voiced].mean())
        return np.stack([loud, slope, period, rel_f0], axis=1)

    def extract(self, utt: Utterance) -> ContentFeatures:
        p = self.prosody(utt)
        n, c = p.shape[0], self.context
        idx = np.clip(np.arange(n)[:, None] + np.arange(-c, c + 1)[None, :], 0, n - 1)
        u = p[idx].reshape(n, -1)
        w, b = self._lift
        return ContentFeatures(np.tanh(u @ w + b), self.frame_rate)


# ----------------------------------------------------------------------------
# speaker embeddings


@dataclass(frozen=True)
class TimbreEmbedding:
    vector: np.ndarray
    provider_id: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)) or not np.linalg.norm(v) > 0:
            raise ValueError(f"invalid timbre embedding from {self.provider_id}")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.size


class SpeakerProvider(Protocol):
    id: str
    dim: int

    def embed(self, utt: Utterance) -> TimbreEmbedding: ...

    def embed_mel(self, mel: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor: ...


@dataclass(frozen=True)
class SyntheticSpeakerProvider:
    """Speaker embedding from the long-term spectral envelope.

    The energy-weighted average log-mel profile is smoothed across bins,
    differenced along frequency (cancels gain and linear tilt), stripped of
    the lowest slopes where pitch harmonics dominate, centred, reweighted per
    band and projected by a seeded Gaussian matrix. All of that is linear, so
    it collapses into one [dim, n_mels] matrix; only the profile and the final
    length normalisation are nonlinear. Written in torch so the timbre loss
    can backpropagate through it.
    """

    id: str
    dim: int = 192
    seed: int = 0
    n_mels: int = 80
    smooth_bins: float = 2.0
    skip_low: int = 5
    mel_cfg: MelConfig = MelConfig()
    _proj: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.n_mels
        offsets = np.arange(-3 * int(math.ceil(self.smooth_bins)), 3 * int(math.ceil(self.smooth_bins)) + 1)
        kernel = np.exp(-0.5 * (offsets / self.smooth_bins) ** 2)
        kernel /= kernel.sum()
        smooth = np.zeros((n, n))
        for i in range(n):
            np.add.at(smooth[i], np.clip(i + offsets, 0, n - 1), kernel)
        diff = (np.eye(n, k=1) - np.eye(n))[: n - 1][self.skip_low :]
        k = diff.shape[0]
        center = np.eye(k) - 1.0 / k
        rng = np.random.default_rng([self.seed, 0x5F])
        band = np.exp(0.3 * rng.standard_normal(k))
        proj = rng.standard_normal((self.dim, k)) / math.sqrt(k) * band[None, :]
        object.__setattr__(self, "_proj", proj @ center @ diff @ smooth)

    def embed_mel(self, mel: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``mel`` [..., T, n_mels], ``mask`` [..., T] of 0/1 -> unit vectors [..., dim]."""
        # log of the time-averaged magnitude spectrum: loud frames dominate, silence drops out
        if mask is None:
            profile = torch.logsumexp(mel, dim=-2) - math.log(mel.shape[-2])
        else:
            m = mask.to(mel.dtype).unsqueeze(-1)
            logm = torch.log(m.clamp_min(1e-30))
            profile = torch.logsumexp(mel + logm, dim=-2) - torch.log(m.sum(dim=-2).clamp_min(1.0))
        e = profile @ torch.as_tensor(self._proj, dtype=mel.dtype, device=mel.device).T
        return e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def embed(self, utt: Utterance) -> TimbreEmbedding:
        mel = torch.from_numpy(compute_mel(utt, self.mel_cfg).frames)
        return TimbreEmbedding(self.embed_mel(mel).numpy(), self.id)


# ----------------------------------------------------------------------------
# registry

HYBRIDFORMER_CONFIG = {
    "model": "HybridFormer",
    "blocks": 12,
    "conv_kernel_size": 31,
    "attention_heads": 4,
    "attention_dim": 256,
    "ffn_dim": 1024,
}
SV_MODEL_NAMES = ("CAM++", "ERes2Net", "ReDimNet")


class ProviderError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProviderRegistry:
    content_provider: ContentProvider | None
    sv_providers: tuple = ()
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "sv_providers", tuple(self.sv_providers))
        if len(self.sv_providers) < 1:
            raise ValueError("at least one speaker provider is required")
        ids = [p.id for p in self.sv_providers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate speaker provider ids: {ids}")

    @property
    def sv_dims(self) -> tuple[int, ...]:
        return tuple(p.dim for p in self.sv_providers)

    @property
    def content_dim(self) -> int:
        if self.content_provider is None:
            raise ProviderError("no content provider registered")
        return self.content_provider.dim


def default_registry(
    seed: int = 0, sv_dims: Sequence[int] = (192, 192, 192), content_dim: int = 256
) -> ProviderRegistry:
    names = list(SV_MODEL_NAMES) + [f"sv{i}" for i in range(len(SV_MODEL_NAMES), len(sv_dims))]
    sv = tuple(
        SyntheticSpeakerProvider(id=f"synthetic-{names[i].lower()}", dim=d, seed=seed * 1000 + i)
        for i, d in enumerate(sv_dims)
    )
    meta = {
        "content": dict(HYBRIDFORMER_CONFIG, stand_in="synthetic-content", seed=seed),
        "sv": [{"model": names[i], "stand_in": p.id, "dim": p.dim} for i, p in enumerate(sv)],
    }
    return ProviderRegistry(SyntheticContentProvider(dim=content_dim, seed=seed), sv, meta)


def extract_content(utt: Utterance, registry: ProviderRegistry) -> ContentFeatures:
    if registry.content_provider is None:
        raise ProviderError("no content provider registered")
    return registry.content_provider.extract(utt)


def extract_speaker_embeddings(utt: Utterance, registry: ProviderRegistry) -> list[TimbreEmbedding]:
    return [p.embed(utt) for p in registry.sv_providers]


def embed_mel_all(registry: ProviderRegistry, mel: torch.Tensor, mask=None) -> list[torch.Tensor]:
    return [p.embed_mel(mel, mask) for p in registry.sv_providers]
