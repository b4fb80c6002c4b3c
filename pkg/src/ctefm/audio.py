"""Waveform container, 16-bit PCM WAV I/O and reference segmentation."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
SHORT_REFERENCE = "short-reference"


class AudioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Utterance:
    """Mono waveform at 16 kHz with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    id: str = ""
    flags: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioFormatError(f"expected mono samples, got shape {samples.shape}")
        if samples.size == 0:
            raise AudioFormatError("empty utterance")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(
                f"sample rate {self.sample_rate} Hz not supported (expected {SAMPLE_RATE})"
            )
        if not np.all(np.isfinite(samples)):
            raise AudioFormatError("non-finite samples")
        if np.max(np.abs(samples)) > 1.0:
            raise AudioFormatError("amplitudes outside [-1, 1]")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


def read_wav(path, utt_id: str | None = None) -> Utterance:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise AudioFormatError(f"{path}: {wf.getnchannels()} channels, expected mono")
            if wf.getsampwidth() != 2:
                raise AudioFormatError(f"{path}: sample width {wf.getsampwidth()}, expected 16-bit PCM")
            if wf.getframerate() != SAMPLE_RATE:
                raise AudioFormatError(
                    f"{path}: sample rate {wf.getframerate()} Hz, expected {SAMPLE_RATE} Hz"
                )
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file ({exc})") from None
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Utterance(pcm, SAMPLE_RATE, utt_id if utt_id is not None else path.stem)


def write_wav(path, utt: Utterance) -> None:
    pcm = np.clip(np.round(utt.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(utt.sample_rate)
        wf.writeframes(pcm.tobytes())


def segment_reference(utt: Utterance, duration_s: float, rng: np.random.Generator) -> Utterance:
    """Cut a random ``duration_s`` window out of ``utt``.

    The offset is uniform over every valid start sample. Utterances shorter
    than the request come back whole with the ``short-reference`` flag.
    """
    n = int(round(duration_s * utt.sample_rate))
    if n <= 0:
        raise ValueError("duration_s must be positive")
    if len(utt) < n:
        return Utterance(utt.samples, utt.sample_rate, utt.id, utt.flags | {SHORT_REFERENCE})
    offset = int(rng.integers(0, len(utt) - n + 1))
    return Utterance(
        utt.samples[offset : offset + n], utt.sample_rate, f"{utt.id}@{offset}", utt.flags
    )
