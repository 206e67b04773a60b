"""Text-instruction embeddings.

A deterministic built-in encoder stands in for a large pretrained text
model: tokens are hashed to fixed pseudo-random vectors, averaged, and
L2-normalized. Externally computed embeddings of any provenance can be
imported from a small binary file instead.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, NumericError

TEXT_DIM = 64
_HASH_SALT = b"taskfuse-embed-v1:"

EMBED_MAGIC = b"FTEMB1"

# one canonical instruction per downstream task, shared by train and eval
CANONICAL_INSTRUCTIONS = {
    "det": "detect objects",
    "seg": "segment every pixel into classes",
    "sod": "highlight the salient object",
}


@dataclass
class InstructionEmbedding:
    """Unit-norm embedding of a task instruction."""

    vector: np.ndarray
    source: str  # "builtin" or "imported"
    instruction_text: str = ""


def _token_vector(token: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(_HASH_SALT + token.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(dim)


def encode_text(instruction: str, dim: int = TEXT_DIM) -> InstructionEmbedding:
    """Encode an instruction string deterministically.

    Lowercases and whitespace-tokenizes, averages the per-token hash
    vectors, and L2-normalizes. Pure function of (string, fixed salt).
    """
    tokens = instruction.lower().split()
    if not tokens:
        raise InputError("instruction must contain at least one token")
    acc = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        acc += _token_vector(tok, dim)
    acc /= len(tokens)
    norm = float(np.linalg.norm(acc))
    if norm == 0.0:
        raise NumericError("instruction hashed to the zero vector")
    return InstructionEmbedding(vector=acc / norm, source="builtin",
                                instruction_text=instruction)


def export_embedding(path, embedding: InstructionEmbedding) -> None:
    """Write the binary embedding format: magic, u32 length, f64 values (LE)."""
    vec = np.ascontiguousarray(embedding.vector, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<I", vec.size))
        fh.write(vec.tobytes())


def import_embedding(path, dim: int = TEXT_DIM) -> InstructionEmbedding:
    """Read an embedding file and L2-normalize it."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(EMBED_MAGIC) + 4 or blob[: len(EMBED_MAGIC)] != EMBED_MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic)")
    (length,) = struct.unpack_from("<I", blob, len(EMBED_MAGIC))
    expected = len(EMBED_MAGIC) + 4 + 8 * length
    if len(blob) != expected:
        raise FormatError(f"{path}: truncated or oversized payload")
    if length != dim:
        raise FormatError(f"{path}: vector length {length}, expected {dim}")
    vec = np.frombuffer(blob, dtype="<f8", offset=len(EMBED_MAGIC) + 4).astype(np.float64)
    if not np.all(np.isfinite(vec)):
        raise NumericError(f"{path}: embedding contains non-finite entries")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise NumericError(f"{path}: embedding has zero norm")
    return InstructionEmbedding(vector=vec / norm, source="imported")


def check_pairwise_distinct(embeddings, min_angle: float = 1e-6) -> None:
    """Fail fast if any two embeddings are (anti)collinear."""
    items = list(embeddings)
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            cos = abs(float(np.dot(items[i].vector, items[j].vector)))
            if cos > 1.0 - min_angle:
                raise NumericError(
                    f"instruction embeddings {i} and {j} are collinear (|cos|={cos})"
                )
