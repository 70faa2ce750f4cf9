"""Text conditioning providers.

The real text encoder is external. ``StubTextEncoder`` derives deterministic
per-token vectors from hashes; ``ArchiveTextEncoder`` serves matrices that
were produced elsewhere and imported into an embedding archive.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_TEXT_TOKENS = 77
DEFAULT_TEXT_DIM = 768


class MissingEmbeddingError(KeyError):
    pass


@dataclass
class TextEmbedding:
    tokens: np.ndarray  # (S, d) float32
    prompt: str

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"text embedding must be S x d with S >= 1, got {self.tokens.shape}")
        if not np.isfinite(self.tokens).all():
            raise ValueError("non-finite text embedding")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


def prompt_key(prompt: str) -> bytes:
    return hashlib.sha256(prompt.encode("utf-8")).digest()


class StubTextEncoder:
    """Hash-seeded unit vectors, one per whitespace token (at most 77).

    The empty prompt maps to a single vector and serves as the
    unconditional embedding.
    """

    def __init__(self, dim: int = DEFAULT_TEXT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{token}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed(self, prompt: str) -> TextEmbedding:
        words = prompt.split()[:MAX_TEXT_TOKENS] or [""]
        return TextEmbedding(np.stack([self._token_vector(w) for w in words]), prompt)


# archive, little-endian:
#   b"DYTE" | u16 version | u32 count
#   count x ( 32-byte sha256(prompt) | u32 S | u32 d | S*d f32 )
ARCHIVE_MAGIC = b"DYTE"
_ARCHIVE_HEADER = struct.Struct("<4sHI")
_ENTRY_HEADER = struct.Struct("<32sII")


def archive_encode(entries: dict[bytes, np.ndarray]) -> bytes:
    parts = [_ARCHIVE_HEADER.pack(ARCHIVE_MAGIC, 1, len(entries))]
    for key in sorted(entries):
        mat = np.asarray(entries[key], dtype="<f4")
        parts.append(_ENTRY_HEADER.pack(key, mat.shape[0], mat.shape[1]))
        parts.append(mat.tobytes())
    return b"".join(parts)


def archive_decode(data: bytes) -> dict[bytes, np.ndarray]:
    if len(data) < _ARCHIVE_HEADER.size:
        raise ValueError("truncated embedding archive")
    magic, version, count = _ARCHIVE_HEADER.unpack_from(data)
    if magic != ARCHIVE_MAGIC or version != 1:
        raise ValueError("not an embedding archive")
    pos = _ARCHIVE_HEADER.size
    out = {}
    for _ in range(count):
        if pos + _ENTRY_HEADER.size > len(data):
            raise ValueError("truncated embedding archive")
        key, S, d = _ENTRY_HEADER.unpack_from(data, pos)
        pos += _ENTRY_HEADER.size
        size = 4 * S * d
        if pos + size > len(data):
            raise ValueError("truncated embedding archive")
        out[key] = np.frombuffer(data, dtype="<f4", count=S * d, offset=pos).reshape(S, d).astype(np.float32)
        pos += size
    if pos != len(data):
        raise ValueError("trailing bytes in embedding archive")
    return out


def archive_import(path: str | Path, prompt: str, matrix: np.ndarray) -> None:
    """Add (or replace) one prompt's embedding matrix in the archive at ``path``."""
    path = Path(path)
    entries = archive_decode(path.read_bytes()) if path.exists() else {}
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    entries[prompt_key(prompt)] = matrix
    path.write_bytes(archive_encode(entries))


class ArchiveTextEncoder:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.entries = archive_decode(self.path.read_bytes())
        dims = {m.shape[1] for m in self.entries.values()}
        self.dim = dims.pop() if len(dims) == 1 else None

    def embed(self, prompt: str) -> TextEmbedding:
        mat = self.entries.get(prompt_key(prompt))
        if mat is None:
            raise MissingEmbeddingError(f"no embedding for prompt {prompt!r} in {self.path}")
        return TextEmbedding(mat[:MAX_TEXT_TOKENS].copy(), prompt)


def embed(prompt: str, provider) -> TextEmbedding:
    return provider.embed(prompt)
