"""Character plugin: an (L-2) x H embedding matrix plus metadata.

On-disk layout (".cgcp", little-endian, bit-exact):

    magic  "CGCP"                       4 bytes
    format_version                      u32
    metadata_length                     u32
    metadata                            UTF-8 JSON (name, class_noun,
                                        descriptor_id, created_at)
    rows, cols                          u32, u32      (L-2, H)
    payload                             rows*cols float32, row-major

Payload is exactly 4*(L-2)*H bytes; for L=77, H=1024 that is 307,200 bytes.
Row r holds the embedding distilled for the character token sitting at
sequence position r+1.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .backend import BackendDescriptor
from .errors import BadMagic, DimMismatch, NonFiniteEntry, VersionUnsupported

MAGIC = b"CGCP"
FORMAT_VERSION = 1
FILE_EXTENSION = ".cgcp"


@dataclass
class CharacterPlugin:
    name: str
    class_noun: str
    rows: np.ndarray  # (L-2, H) float32
    descriptor_id: str
    created_at: float = field(default_factory=lambda: time.time())
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise DimMismatch(f"plugin rows must be 2-D, got shape {self.rows.shape}")

    @property
    def shape(self) -> tuple:
        return self.rows.shape

    def row_for_position(self, position: int) -> np.ndarray:
        """Embedding distilled for sequence position ``position`` (1..L-2)."""
        return self.rows[position - 1]


def serialize(plugin: CharacterPlugin) -> bytes:
    meta = json.dumps(
        {
            "name": plugin.name,
            "class_noun": plugin.class_noun,
            "descriptor_id": plugin.descriptor_id,
            "created_at": plugin.created_at,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    rows, cols = plugin.rows.shape
    payload = plugin.rows.astype("<f4", copy=False).tobytes(order="C")
    return b"".join([
        MAGIC,
        struct.pack("<I", plugin.format_version),
        struct.pack("<I", len(meta)),
        meta,
        struct.pack("<II", rows, cols),
        payload,
    ])


def header_length(plugin: CharacterPlugin) -> int:
    return len(serialize(plugin)) - 4 * plugin.rows.size


def deserialize(data: bytes) -> CharacterPlugin:
    if data[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {data[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"format version {version} not supported")
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DimMismatch(f"metadata block unreadable: {exc}") from exc
    off += meta_len
    rows, cols = struct.unpack_from("<II", data, off)
    off += 8
    expected = 4 * rows * cols
    payload = data[off:off + expected]
    if len(payload) != expected:
        raise DimMismatch(
            f"payload truncated: dims say {expected} bytes, found {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    if not np.isfinite(values).all():
        raise NonFiniteEntry("plugin payload contains NaN or Inf")
    return CharacterPlugin(
        name=meta["name"],
        class_noun=meta["class_noun"],
        rows=values,
        descriptor_id=meta["descriptor_id"],
        created_at=meta["created_at"],
        format_version=version,
    )


def save(plugin: CharacterPlugin, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(plugin))


def load(path) -> CharacterPlugin:
    with open(path, "rb") as f:
        return deserialize(f.read())


class PluginStore:
    """Directory of .cgcp files addressed by plugin name."""

    def __init__(self, root):
        from pathlib import Path

        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, name: str):
        return self.root / f"{name}{FILE_EXTENSION}"

    def names(self) -> List[str]:
        return sorted(p.stem for p in self.root.glob(f"*{FILE_EXTENSION}"))

    def __contains__(self, name: str) -> bool:
        return self.path_for(name).exists()

    def get(self, name: str) -> Optional[CharacterPlugin]:
        path = self.path_for(name)
        if not path.exists():
            return None
        return load(path)

    def add(self, plugin: CharacterPlugin, overwrite: bool = False) -> None:
        from .errors import DuplicatePlugin

        path = self.path_for(plugin.name)
        if path.exists() and not overwrite:
            raise DuplicatePlugin(f"plugin {plugin.name!r} already stored")
        save(plugin, path)


def validate(plugin: CharacterPlugin, descriptor: BackendDescriptor,
             tokenizer=None) -> List[str]:
    """Return violations (empty list means the plugin fits the descriptor)."""
    violations = []
    rows, cols = plugin.rows.shape
    if rows != descriptor.plugin_rows:
        violations.append(
            f"row count {rows} != L-2 = {descriptor.plugin_rows}"
        )
    if cols != descriptor.H:
        violations.append(f"column count {cols} != H = {descriptor.H}")
    if not np.isfinite(plugin.rows).all():
        violations.append("rows contain non-finite entries")
    if plugin.descriptor_id != descriptor.backend_id:
        violations.append(
            f"descriptor id {plugin.descriptor_id!r} != {descriptor.backend_id!r}"
        )
    if tokenizer is not None:
        try:
            tokenizer.noun_token_id(plugin.class_noun)
        except Exception:
            violations.append(f"class noun {plugin.class_noun!r} is not a single token")
    return violations
