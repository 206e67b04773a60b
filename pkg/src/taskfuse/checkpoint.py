"""Binary checkpoint format with a bitwise round-trip guarantee.

Layout (little-endian): magic "FWCKPT1", u16 stage-tag length + UTF-8 tag,
u32 metadata length + canonical JSON, u32 entry count, then per entry a
u16 name length + UTF-8 name, u8 kind (0 parameter, 1 statistic), u8 ndim,
ndim x u32 dims, and the f64 payload. Entry order is the deterministic
parameter-tree traversal order, so load followed by save reproduces the
file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .params import named_items
from .tensor import Tensor

MAGIC = b"FWCKPT1"


@dataclass
class Checkpoint:
    stage: str
    metadata: dict
    entries: list  # (name: str, kind: int, array: np.ndarray)

    def entry_dict(self) -> dict:
        return {name: arr for name, _, arr in self.entries}

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @staticmethod
    def from_tree(stage: str, tree, metadata: dict | None = None) -> "Checkpoint":
        entries = []
        for name, kind, arr in named_items(tree):
            data = arr.data if isinstance(arr, Tensor) else arr
            entries.append((name, kind, np.ascontiguousarray(data, dtype=np.float64)))
        return Checkpoint(stage=stage, metadata=dict(metadata or {}), entries=entries)

    def to_bytes(self) -> bytes:
        out = [MAGIC]
        stage_b = self.stage.encode("utf-8")
        out.append(struct.pack("<H", len(stage_b)))
        out.append(stage_b)
        meta_b = json.dumps(self.metadata, sort_keys=True,
                            separators=(",", ":")).encode("utf-8")
        out.append(struct.pack("<I", len(meta_b)))
        out.append(meta_b)
        out.append(struct.pack("<I", len(self.entries)))
        for name, kind, arr in self.entries:
            name_b = name.encode("utf-8")
            out.append(struct.pack("<H", len(name_b)))
            out.append(name_b)
            out.append(struct.pack("<BB", kind, arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @staticmethod
    def load(path) -> "Checkpoint":
        with open(path, "rb") as fh:
            blob = fh.read()
        if not blob.startswith(MAGIC):
            raise FormatError(f"{path}: not a checkpoint file (bad magic)")
        off = len(MAGIC)
        try:
            (stage_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            stage = blob[off : off + stage_len].decode("utf-8")
            off += stage_len
            (meta_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            metadata = json.loads(blob[off : off + meta_len].decode("utf-8"))
            off += meta_len
            (count,) = struct.unpack_from("<I", blob, off)
            off += 4
            entries = []
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", blob, off)
                off += 2
                name = blob[off : off + name_len].decode("utf-8")
                off += name_len
                kind, ndim = struct.unpack_from("<BB", blob, off)
                off += 2
                dims = struct.unpack_from(f"<{ndim}I", blob, off)
                off += 4 * ndim
                size = int(np.prod(dims)) if ndim else 1
                arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
                off += 8 * size
                entries.append((name, kind, arr.reshape(dims).astype(np.float64)))
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
        if off != len(blob):
            raise FormatError(f"{path}: trailing bytes after checkpoint payload")
        return Checkpoint(stage=stage, metadata=metadata, entries=entries)


def load_into(tree, ckpt: Checkpoint) -> None:
    """Copy checkpoint entries into a freshly built tree of matching layout."""
    slots = list(named_items(tree))
    if len(slots) != len(ckpt.entries):
        raise FormatError(
            f"checkpoint has {len(ckpt.entries)} entries, model expects {len(slots)}"
        )
    for (name, kind, arr), (ename, ekind, earr) in zip(slots, ckpt.entries):
        if name != ename or kind != ekind:
            raise FormatError(f"checkpoint entry {ename!r} does not match slot {name!r}")
        target = arr.data if isinstance(arr, Tensor) else arr
        if target.shape != earr.shape:
            raise FormatError(
                f"checkpoint entry {name!r} has shape {earr.shape}, expected {target.shape}"
            )
        target[...] = earr


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
