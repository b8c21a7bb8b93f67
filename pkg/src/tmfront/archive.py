"""Named-tensor archive: a JSON manifest followed by a little-endian f32 blob.

Byte layout::

    bytes 0..7     magic  b"TMTNSR01"
    bytes 8..15    manifest length N, unsigned 64-bit little-endian
    bytes 16..16+N UTF-8 JSON manifest
    remainder      blob: tensors concatenated in manifest order, '<f4' each

The manifest is ``{"format": "tmfront-tensors", "version": 1, "tensors": [...]}``
where every entry is ``{"name", "shape", "dtype": "f32", "byte_offset"}`` and
``byte_offset`` is relative to the start of the blob. Offsets must be exactly
the running sum of preceding tensor sizes and the blob must end at the last
tensor; anything else is rejected. Values are widened to float64 on load.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TMTNSR01"
FORMAT = "tmfront-tensors"
VERSION = 1


class ArchiveError(ValueError):
    """Malformed archive or missing tensor."""


class TensorArchive(dict):
    """``dict`` of name -> float64 array that names the tensor on a missing key."""

    def __missing__(self, name):
        raise ArchiveError(f"missing tensor '{name}' in weight archive")


def save_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        if not np.all(np.isfinite(arr)):
            raise ArchiveError(f"tensor '{name}' has non-finite values")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32", "byte_offset": offset}
        )
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"format": FORMAT, "version": VERSION, "tensors": entries}, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def load_archive(path) -> TensorArchive:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    if 16 + n > len(raw):
        raise ArchiveError(f"{path}: manifest length {n} exceeds file size")
    try:
        manifest = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise ArchiveError(f"{path}: unsupported manifest header")
    blob = raw[16 + n :]
    out = TensorArchive()
    expected = 0
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        if entry.get("dtype") != "f32":
            raise ArchiveError(f"tensor '{name}': unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        if any(s < 0 for s in shape):
            raise ArchiveError(f"tensor '{name}': negative extent in {shape}")
        if entry["byte_offset"] != expected:
            raise ArchiveError(
                f"tensor '{name}': byte_offset {entry['byte_offset']} != expected {expected}"
            )
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if expected + size > len(blob):
            raise ArchiveError(f"tensor '{name}': data runs past end of blob")
        if name in out:
            raise ArchiveError(f"duplicate tensor '{name}'")
        arr = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=expected)
        out[name] = arr.reshape(shape).astype(np.float64)
        expected += size
    if expected != len(blob):
        raise ArchiveError(f"{path}: {len(blob) - expected} trailing bytes after last tensor")
    return out


_ALLOWED = [
    r"patch_embed\.proj",
    r"block\d+\.attn\.(ln_gamma|ln_beta|wq|bq|wk|bk|wv|bv|wo|bo)",
    r"block\d+\.mlp\.(ln_gamma|ln_beta|w1|b1|w2|b2)",
    r"block\d+\.adapter\.(A|B)",
    r"resampler\.image\.(queries|wq|bq|wk|bk|wv|bv|wo|bo)",
    r"resampler\.token\.(wq|bq|wk|bk|wv|bv|wo|bo|random_queries)",
]
_NAME_RE = re.compile("|".join(f"(?:{p})" for p in _ALLOWED))


def check_weight_names(tensors: Mapping[str, np.ndarray]) -> None:
    """Reject any tensor whose name breaks the weight naming convention."""
    bad = sorted(n for n in tensors if not _NAME_RE.fullmatch(n))
    if bad:
        raise ArchiveError(f"tensor names violate naming convention: {bad}")
