"""Binary model checkpoints with a human-readable sidecar manifest.

Layout: 8-byte magic, u32 format version, u32 length-prefixed JSON
architecture descriptor, then every parameter as little-endian float64 in
declaration order. The sidecar `<path>.manifest.json` lists parameter names,
shapes, and a SHA-256 checksum of the parameter payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import HvaeConfig, HvaeModel

MAGIC = b"HVAECKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(model: HvaeModel, path) -> None:
    """Write the checkpoint atomically (temp file + rename) plus manifest."""
    path = Path(path)
    named = model.named_parameters()
    payload = b"".join(t.data.astype("<f8").tobytes() for _, t in named)
    descriptor = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", len(descriptor))
    blob += descriptor + payload
    manifest = {
        "format": "hvaeood-checkpoint",
        "version": VERSION,
        "seed": model.config.seed,
        "parameters": [
            {"name": name, "shape": list(t.data.shape)} for name, t in named
        ],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    _atomic_write(path, blob)
    _atomic_write(
        path.with_suffix(path.suffix + ".manifest.json"),
        (json.dumps(manifest, indent=2) + "\n").encode("utf-8"),
    )


def load_checkpoint(path) -> HvaeModel:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    desc_len = struct.unpack("<I", raw[12:16])[0]
    descriptor = json.loads(raw[16 : 16 + desc_len].decode("utf-8"))
    config = HvaeConfig.from_dict(descriptor)
    model = HvaeModel(config)
    offset = 16 + desc_len
    for name, t in model.named_parameters():
        count = t.data.size
        end = offset + count * 8
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        t.data = np.frombuffer(raw[offset:end], dtype="<f8").reshape(t.data.shape).copy()
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    manifest_path = Path(str(path) + ".manifest.json")
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        digest = hashlib.sha256(raw[16 + desc_len :]).hexdigest()
        if manifest.get("payload_sha256") not in (None, digest):
            raise CheckpointError(f"{path}: payload checksum mismatch with manifest")
    return model


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
