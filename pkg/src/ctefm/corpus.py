"""Deterministic multi-speaker toy corpus.

Each speaker is a harmonic source with its own pitch range, three formant
resonances and spectral tilt. Utterances differ in duration, syllable rhythm
and intonation. Stands in for LibriTTS at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, Utterance, write_wav
from .data import ManifestItem, write_manifest


@dataclass(frozen=True)
class SpeakerVoice:
    f0: float
    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]
    gains: tuple[float, float, float]
    tilt_db_per_octave: float

    @classmethod
    def sample(cls, seed: int, speaker: int) -> "SpeakerVoice":
        rng = np.random.default_rng([seed, speaker, 0x5B])
        return cls(
            f0=float(np.exp(rng.uniform(math.log(85.0), math.log(260.0)))),
            formants=(
                float(rng.uniform(300, 850)),
                float(rng.uniform(950, 2300)),
                float(rng.uniform(2500, 3900)),
            ),
            bandwidths=(
                float(rng.uniform(60, 160)),
                float(rng.uniform(90, 220)),
                float(rng.uniform(150, 320)),
            ),
            gains=tuple(float(g) for g in 10 ** (rng.uniform(-6, 6, size=3) / 20)),
            tilt_db_per_octave=float(rng.uniform(-9.0, -3.0)),
        )

    def envelope(self, freq: np.ndarray) -> np.ndarray:
        f = np.maximum(freq, 1.0)
        tilt = 10 ** (self.tilt_db_per_octave * np.log2(f / self.f0) / 20)
        res = sum(
            g / (1.0 + ((f - fc) / (0.5 * bw)) ** 2)
            for fc, bw, g in zip(self.formants, self.bandwidths, self.gains)
        )
        return tilt * (0.05 + res)


def synth_utterance(voice: SpeakerVoice, seed: int, speaker: int, index: int) -> Utterance:
    rng = np.random.default_rng([seed, speaker, index, 0xA7])
    duration = rng.uniform(4.2, 5.6)
    n = int(duration * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE

    # syllable rhythm
    env = np.zeros(n)
    syl_pitch = np.zeros(n)
    pos = rng.uniform(0.05, 0.25)
    while pos < duration - 0.2:
        length = rng.uniform(0.12, 0.35)
        a, b = int(pos * SAMPLE_RATE), min(n, int((pos + length) * SAMPLE_RATE))
        env[a:b] = rng.uniform(0.5, 1.0) * np.sin(np.linspace(0.0, np.pi, b - a)) ** 0.6
        syl_pitch[a:b] = rng.normal(0.0, 0.05)
        pos += length + rng.uniform(0.03, 0.18)
    kernel = np.hanning(801)
    syl_pitch = np.convolve(syl_pitch, kernel / kernel.sum(), mode="same")

    contour = 0.08 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi))
    f0 = voice.f0 * np.exp(contour + syl_pitch - 0.04 * t / duration)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE

    x = np.zeros(n)
    for k in range(1, int(7600 / f0.min()) + 1):
        fk = k * f0
        amp = np.where(fk < 7600, voice.envelope(fk), 0.0)
        x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    x *= env
    x += 0.02 * np.max(np.abs(x)) * env * rng.standard_normal(n)
    x = 0.6 * x / np.max(np.abs(x))
    x += 1e-3 * rng.standard_normal(n)
    return Utterance(np.clip(x, -1.0, 1.0), SAMPLE_RATE, f"spk{speaker:02d}_utt{index:03d}")


class CorpusExistsError(FileExistsError):
    pass


def synth_corpus(
    n_speakers: int,
    n_utts: int,
    out_dir,
    seed: int = 0,
    val_fraction: float = 0.2,
    force: bool = False,
) -> Path:
    """Write ``n_speakers * n_utts`` WAV files plus ``manifest.jsonl``; returns the manifest path.

    The last ``round(val_fraction * n_utts)`` utterances of every speaker go
    to the ``val`` split.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise CorpusExistsError(f"{out_dir} is not empty (use --force to overwrite)")
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    n_val = min(n_utts - 1, int(round(val_fraction * n_utts))) if n_utts > 1 else 0
    items = []
    for spk in range(n_speakers):
        voice = SpeakerVoice.sample(seed, spk)
        for i in range(n_utts):
            utt = synth_utterance(voice, seed, spk, i)
            rel = Path("wavs") / f"{utt.id}.wav"
            write_wav(out_dir / rel, utt)
            split = "val" if i >= n_utts - n_val else "train"
            items.append(ManifestItem(str(rel), f"spk{spk:02d}", split))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, items)
    return manifest
