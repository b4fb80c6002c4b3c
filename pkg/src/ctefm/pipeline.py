"""Zero-shot conversion, objective evaluation and vocoder adapters."""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .audio import Utterance, read_wav
from .cfm import euler_sample
from .checkpoint import load_checkpoint
from .data import FeatureCache, ManifestItem, read_manifest
from .features import MelSpectrogram, ProviderRegistry, embed_mel_all
from .losses import secs
from .model import VoiceConverter
from .tensorfile import save_tensor
from .trainer import model_from_checkpoint, registry_from_checkpoint


@dataclass(frozen=True)
class ConversionRequest:
    source_path: str
    reference_path: str
    output_path: str
    checkpoint_path: str
    euler_steps: int = 20
    seed: int = 0

    def __post_init__(self):
        paths = [self.source_path, self.output_path, self.checkpoint_path]
        if len({str(Path(p).resolve()) for p in paths}) != len(paths) or (
            Path(self.output_path).resolve() == Path(self.reference_path).resolve()
        ):
            raise ValueError("output, source and checkpoint paths must be distinct")
        if self.euler_steps < 1:
            raise ValueError("euler_steps must be >= 1")


class IdentityMelVocoder:
    """Writes the generated mel itself as a CTEFM1 tensor file."""

    id = "identity-mel"

    def write(self, mel: MelSpectrogram, path) -> Path:
        save_tensor(path, mel.frames)
        return Path(path)


class ExternalVocoder:
    """Runs a user-supplied command turning a CTEFM1 mel file into a WAV.

    ``command`` may reference ``{mel}`` and ``{wav}``, e.g.
    ``"python my_bigvgan.py --mel {mel} --out {wav}"``.
    """

    id = "external"

    def __init__(self, command: str):
        if "{mel}" not in command or "{wav}" not in command:
            raise ValueError("vocoder command must contain {mel} and {wav} placeholders")
        self.command = command

    def write(self, mel: MelSpectrogram, path) -> Path:
        with tempfile.TemporaryDirectory() as tmp:
            mel_path = Path(tmp) / "mel.ctefm"
            save_tensor(mel_path, mel.frames)
            argv = [a.format(mel=str(mel_path), wav=str(path)) for a in shlex.split(self.command)]
            subprocess.run(argv, check=True)
        return Path(path)


def make_vocoder(name: str = "identity-mel", command: str | None = None):
    if name == "identity-mel":
        return IdentityMelVocoder()
    if name == "external":
        if not command:
            raise ValueError("the external vocoder needs a command")
        return ExternalVocoder(command)
    raise ValueError(f"unknown vocoder {name!r}")


@torch.no_grad()
def convert_mel(
    model: VoiceConverter,
    registry: ProviderRegistry,
    source,
    reference_mel: np.ndarray,
    steps: int = 20,
    seed: int = 0,
    cache: FeatureCache | None = None,
) -> np.ndarray:
    """Mel frames of ``source`` re-voiced with the timbre of ``reference_mel``.

    ``source`` is an Utterance or an already cached item. The whole reference
    is used for the speaker embeddings.
    """
    cache = cache or FeatureCache(registry)
    src = cache.features(source) if isinstance(source, Utterance) else source
    dtype = next(model.parameters()).dtype
    content = torch.from_numpy(src.content).to(dtype)
    ref = embed_mel_all(registry, torch.from_numpy(np.asarray(reference_mel)).to(dtype))
    was_training = model.training
    model.eval()
    try:
        h, f_T = model.condition(content, ref)
        rng = np.random.default_rng(seed)
        x = euler_sample(model, h, f_T, steps, rng, shape=(content.shape[0], model.n_mels), dtype=dtype)
    finally:
        model.train(was_training)
    return model.denormalize(x).double().numpy()


def run_conversion(req: ConversionRequest, vocoder=None) -> Path:
    ckpt = load_checkpoint(req.checkpoint_path)
    model = model_from_checkpoint(ckpt)
    registry = registry_from_checkpoint(ckpt)
    cache = FeatureCache(registry)
    source = read_wav(req.source_path)
    reference = cache.features(read_wav(req.reference_path))
    mel = convert_mel(model, registry, source, reference.mel, req.euler_steps, req.seed, cache)
    return (vocoder or IdentityMelVocoder()).write(MelSpectrogram(mel), req.output_path)


def _embed(registry: ProviderRegistry, mel: np.ndarray) -> list[torch.Tensor]:
    return embed_mel_all(registry, torch.from_numpy(np.asarray(mel, dtype=np.float64)))


def evaluate(
    items: list[ManifestItem],
    registry: ProviderRegistry,
    converter: Callable,
    n_pairs: int | None = None,
    seed: int = 0,
    n_teacher: int = 20,
    cache: FeatureCache | None = None,
) -> dict:
    """Objective speaker-similarity report over seeded (source, reference) pairs.

    ``converter(source_item, reference_item, pair_seed)`` returns mel frames.
    Each pair also gets a distractor speaker (neither source nor reference)
    when at least three speakers exist; ``direction_rate`` is the fraction of
    pairs whose output is closer to the intended reference than to the
    distractor. ``mel_mse_teacher`` converts up to ``n_teacher`` items with
    their own utterance as reference and compares against the ground truth.
    """
    cache = cache or FeatureCache(registry)
    loaded = [c for c in (cache.get(it) for it in items) if c is not None]
    by_speaker: dict[str, list] = {}
    for c in loaded:
        by_speaker.setdefault(c.item.speaker_id, []).append(c)
    speakers = sorted(by_speaker)
    if len(speakers) < 2:
        raise ValueError(f"evaluation needs at least 2 speakers, found {len(speakers)}")
    n_pairs = len(loaded) if n_pairs is None else n_pairs
    ids = [p.id for p in registry.sv_providers]

    pairs = []
    for k in range(n_pairs):
        rng = np.random.default_rng([seed, k])
        src = loaded[k % len(loaded)] if n_pairs <= len(loaded) else loaded[int(rng.integers(len(loaded)))]
        others = [s for s in speakers if s != src.item.speaker_id]
        ref_spk = others[int(rng.integers(len(others)))]
        ref = by_speaker[ref_spk][int(rng.integers(len(by_speaker[ref_spk])))]
        rest = [s for s in others if s != ref_spk]
        distractor = None
        if rest:
            d_spk = rest[int(rng.integers(len(rest)))]
            distractor = by_speaker[d_spk][int(rng.integers(len(by_speaker[d_spk])))]
        out = converter(src, ref, int(rng.integers(2**31)))
        out_e, ref_e = _embed(registry, out), _embed(registry, ref.mel)
        per = [float(secs(a, b)) for a, b in zip(out_e, ref_e)]
        rec = {
            "source": src.utt.id,
            "reference": ref.utt.id,
            "secs": float(np.mean(per)),
            "secs_per_provider": dict(zip(ids, per)),
        }
        if distractor is not None:
            d_e = _embed(registry, distractor.mel)
            rec["distractor"] = distractor.utt.id
            rec["secs_distractor"] = float(np.mean([float(secs(a, b)) for a, b in zip(out_e, d_e)]))
            rec["reference_vs_distractor"] = float(
                np.mean([float(secs(a, b)) for a, b in zip(ref_e, d_e)])
            )
        pairs.append(rec)

    teacher = []
    for i, c in enumerate(loaded[:n_teacher]):
        out = converter(c, c, int(np.random.default_rng([seed, 0x7E, i]).integers(2**31)))
        teacher.append(float(np.mean((np.asarray(out) - c.mel) ** 2)))

    with_d = [p for p in pairs if "distractor" in p]
    report = {
        "n_pairs": len(pairs),
        "secs_mean": float(np.mean([p["secs"] for p in pairs])) if pairs else float("nan"),
        "secs_per_provider": {
            pid: float(np.mean([p["secs_per_provider"][pid] for p in pairs])) if pairs else float("nan")
            for pid in ids
        },
        "mel_mse_teacher": float(np.mean(teacher)) if teacher else float("nan"),
        "direction_rate": (
            float(np.mean([p["secs"] > p["secs_distractor"] for p in with_d])) if with_d else None
        ),
        "inter_speaker_baseline": (
            float(np.mean([p["reference_vs_distractor"] for p in with_d])) if with_d else None
        ),
        "pairs": pairs,
    }
    return report


def model_converter(model: VoiceConverter, registry: ProviderRegistry, steps: int = 20, cache=None):
    def convert(src, ref, seed):
        return convert_mel(model, registry, src, ref.mel, steps, seed, cache)

    return convert


def run_eval(manifest, checkpoint, out_report, seed: int = 0, n_pairs: int | None = None,
             steps: int = 20, split: str | None = "val") -> dict:
    ckpt = load_checkpoint(checkpoint)
    model = model_from_checkpoint(ckpt)
    registry = registry_from_checkpoint(ckpt)
    items = read_manifest(manifest, split)
    if not items:
        raise ValueError(f"no {split!r} items in {manifest}")
    cache = FeatureCache(registry)
    report = evaluate(items, registry, model_converter(model, registry, steps, cache), n_pairs, seed,
                      cache=cache)
    Path(out_report).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
