"""Checkpoint container.

Layout: ``b"CTEFMCK1"``, uint64 little-endian header length, a UTF-8 JSON
header (sorted keys, compact separators), then float32 payloads in the
order the header lists them. Serialisation is canonical, so save -> load ->
save reproduces the same bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CTEFMCK1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpoint(CheckpointError):
    def __init__(self, detail: str):
        super().__init__(f"corrupt-checkpoint: {detail}")


class VersionMismatch(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found} is not supported (expected {expected})")
        self.found, self.expected = found, expected


@dataclass
class Checkpoint:
    iteration: int
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    index, payloads, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        a = np.require(np.asarray(ckpt.tensors[name], dtype="<f4"), requirements="C")
        raw = a.tobytes(order="C")
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": ckpt.format_version,
        "iteration": int(ckpt.iteration),
        "config": ckpt.config,
        "meta": ckpt.meta,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(payloads)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint("missing CTEFMCK1 magic")
    (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    if start + hlen > len(data):
        raise CorruptCheckpoint("header runs past end of file")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(version, FORMAT_VERSION)
    body = memoryview(data)[start + hlen :]
    tensors = {}
    for rec in header["tensors"]:
        lo, n = rec["offset"], rec["nbytes"]
        if lo + n > len(body) or n != 4 * int(np.prod(rec["shape"], dtype=np.int64)):
            raise CorruptCheckpoint(f"tensor {rec['name']!r} truncated")
        tensors[rec["name"]] = np.frombuffer(body[lo : lo + n], dtype="<f4").reshape(rec["shape"]).copy()
    expected_end = max((r["offset"] + r["nbytes"] for r in header["tensors"]), default=0)
    if expected_end != len(body):
        raise CorruptCheckpoint("unexpected trailing bytes")
    return Checkpoint(header["iteration"], header["config"], tensors, header.get("meta", {}), version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
