"""Manifest ingestion, per-utterance feature cache and batch construction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import Utterance, read_wav, segment_reference
from .features import (
    MelConfig,
    ProviderRegistry,
    align_frames,
    compute_mel,
    extract_content,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifestItem:
    path: str
    speaker_id: str
    split: str = "train"


def read_manifest(path, split: str | None = None) -> list[ManifestItem]:
    """Read a JSON-lines manifest. Relative paths resolve against the manifest's directory."""
    path = Path(path)
    items = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = {"path", "speaker_id", "split"} - rec.keys()
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            p = Path(rec["path"])
            if not p.is_absolute():
                p = path.parent / p
            items.append(ManifestItem(str(p), str(rec["speaker_id"]), str(rec["split"])))
    if split is not None:
        items = [it for it in items if it.split == split]
    return items


def write_manifest(path, items) -> None:
    with open(path, "w") as fh:
        for it in items:
            fh.write(json.dumps({"path": it.path, "speaker_id": it.speaker_id, "split": it.split}))
            fh.write("\n")


@dataclass
class CachedItem:
    item: ManifestItem
    utt: Utterance
    mel: np.ndarray  # [T, n_mels]
    content: np.ndarray  # [T, D], already aligned to mel frames


class FeatureCache:
    """Loads each utterance once and keeps its mel and mel-aligned content features."""

    def __init__(self, registry: ProviderRegistry, mel_cfg: MelConfig = MelConfig()):
        self.registry = registry
        self.mel_cfg = mel_cfg
        self._items: dict[str, CachedItem | None] = {}

    def features(self, utt: Utterance, item: ManifestItem | None = None) -> CachedItem:
        mel = compute_mel(utt, self.mel_cfg).frames
        cf = extract_content(utt, self.registry)
        content = align_frames(
            cf.frames, cf.frame_rate, mel.shape[0], utt.sample_rate / self.mel_cfg.hop_length
        )
        return CachedItem(item, utt, mel, content)

    def get(self, item: ManifestItem) -> CachedItem | None:
        if item.path not in self._items:
            try:
                self._items[item.path] = self.features(read_wav(item.path), item)
            except (OSError, ValueError, EOFError) as exc:
                logger.warning("skipping unreadable item %s: %s", item.path, exc)
                self._items[item.path] = None
        return self._items[item.path]


@dataclass
class TrainBatch:
    """Right-padded batch. Mel/content are frame-major: [B, T, C]."""

    ids: list[str]
    mel: torch.Tensor
    content: torch.Tensor
    mask: torch.Tensor  # [B, T]
    ref_mel: torch.Tensor  # [B, Tr, n_mels] reference segment mels
    ref_mask: torch.Tensor
    noise: torch.Tensor  # [B, T, n_mels], zero on padding
    t: torch.Tensor  # [B]

    @property
    def lengths(self) -> torch.Tensor:
        return self.mask.sum(dim=1)

    def to(self, dtype) -> "TrainBatch":
        return TrainBatch(
            self.ids,
            *(
                getattr(self, k).to(dtype)
                for k in ("mel", "content", "mask", "ref_mel", "ref_mask", "noise", "t")
            ),
        )


class BatchError(RuntimeError):
    pass


def pad_stack(arrays: list[np.ndarray], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    length = length or max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), length) + arrays[0].shape[1:])
    mask = np.zeros((len(arrays), length))
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = 1.0
    return out, mask


def collate(
    items: list[CachedItem],
    rng: np.random.Generator,
    reference_duration_s: float,
    mel_cfg: MelConfig,
    segment_frames: int = 0,
    pad_to: int | None = None,
) -> TrainBatch:
    """Assemble a batch from cached items.

    Per item, in order: a reference segment from the same utterance, an
    optional random crop of the source to ``segment_frames`` frames, the
    flow time ``t`` and Gaussian noise drawn at the item's own length (so
    padding never changes the draws).
    """
    if not items:
        raise BatchError("empty batch")
    mels, contents, refs, noises, ts = [], [], [], [], []
    for it in items:
        ref = segment_reference(it.utt, reference_duration_s, rng)
        refs.append(compute_mel(ref, mel_cfg).frames)
        mel, content = it.mel, it.content
        if segment_frames and mel.shape[0] > segment_frames:
            start = int(rng.integers(0, mel.shape[0] - segment_frames + 1))
            mel = mel[start : start + segment_frames]
            content = content[start : start + segment_frames]
        mels.append(mel)
        contents.append(content)
        ts.append(rng.uniform(0.0, 1.0))
        noises.append(rng.standard_normal(mel.shape))
    mel, mask = pad_stack(mels, pad_to)
    content, _ = pad_stack(contents, pad_to)
    noise, _ = pad_stack(noises, pad_to)
    ref_mel, ref_mask = pad_stack(refs)
    f = torch.from_numpy
    return TrainBatch(
        [it.utt.id for it in items],
        f(mel).float(),
        f(content).float(),
        f(mask).float(),
        f(ref_mel).float(),
        f(ref_mask).float(),
        f(noise).float(),
        torch.tensor(ts, dtype=torch.float32),
    )


def build_batch(
    manifest_items: list[ManifestItem],
    cache: FeatureCache,
    rng: np.random.Generator,
    reference_duration_s: float = 4.0,
    segment_frames: int = 0,
) -> TrainBatch:
    """Load (or reuse) the listed items and collate them. Unreadable items are skipped."""
    loaded = [c for c in (cache.get(it) for it in manifest_items) if c is not None]
    if not loaded:
        raise BatchError("empty batch: no readable items")
    return collate(loaded, rng, reference_duration_s, cache.mel_cfg, segment_frames)
