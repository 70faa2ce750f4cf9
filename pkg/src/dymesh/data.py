"""Dataset machinery: .dmb codec, window slicing, normalization, filtering,
padded batching and corpus latent statistics."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .mesh import DynamicMesh, MeshValidationError, merge_duplicate_vertices

# ---------------------------------------------------------------------------
# .dmb codec
#
# little-endian:
#   b"DYM1" | u16 version | u32 M | u32 N | u32 T
#   M*3 u32 faces | T*N*3 f32 vertices
#   optional: u32 caption_len | caption (UTF-8)

DMB_MAGIC = b"DYM1"
DMB_VERSION = 1
_HEADER = struct.Struct("<4sHIII")
MAX_FRAMES = 200


class DmbError(ValueError):
    code = "dmb-error"


class DmbBadMagic(DmbError):
    code = "bad-magic"


class DmbUnsupportedVersion(DmbError):
    code = "unsupported-version"


class DmbInvalidHeader(DmbError):
    code = "invalid-header"


class DmbTruncated(DmbError):
    code = "truncated"


class DmbTrailingBytes(DmbError):
    code = "trailing-bytes"


class DmbIndexOutOfRange(DmbError):
    code = "index-out-of-range"


class DmbInvalidMesh(DmbError):
    code = "invalid-mesh"


class DmbBadCaption(DmbError):
    code = "bad-caption"


def dmb_encode(mesh: DynamicMesh) -> bytes:
    mesh.validate()
    T, N, _ = mesh.vertices.shape
    parts = [
        _HEADER.pack(DMB_MAGIC, DMB_VERSION, mesh.num_faces, N, T),
        mesh.faces.astype("<u4").tobytes(),
        mesh.vertices.astype("<f4").tobytes(),
    ]
    if mesh.caption is not None:
        cap = mesh.caption.encode("utf-8")
        parts.append(struct.pack("<I", len(cap)) + cap)
    return b"".join(parts)


def dmb_decode(data: bytes) -> DynamicMesh:
    if len(data) < _HEADER.size:
        if data[:4] != DMB_MAGIC[: len(data[:4])]:
            raise DmbBadMagic("not a .dmb file")
        raise DmbTruncated(f"header needs {_HEADER.size} bytes, got {len(data)}")
    magic, version, M, N, T = _HEADER.unpack_from(data)
    if magic != DMB_MAGIC:
        raise DmbBadMagic(f"bad magic {magic!r}")
    if version != DMB_VERSION:
        raise DmbUnsupportedVersion(f"version {version}")
    if M < 1 or N < 3 or T < 1:
        raise DmbInvalidHeader(f"invalid extents M={M} N={N} T={T}")
    faces_end = _HEADER.size + 12 * M
    verts_end = faces_end + 12 * N * T
    if len(data) < verts_end:
        raise DmbTruncated(f"payload needs {verts_end} bytes, got {len(data)}")
    caption = None
    rest = len(data) - verts_end
    if rest:
        if rest < 4:
            raise DmbTruncated("caption length field cut short")
        (clen,) = struct.unpack_from("<I", data, verts_end)
        if clen > rest - 4:
            raise DmbTruncated(f"caption needs {clen} bytes, got {rest - 4}")
        if clen < rest - 4:
            raise DmbTrailingBytes(f"{rest - 4 - clen} bytes after caption")
        try:
            caption = data[verts_end + 4 :].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DmbBadCaption(str(exc)) from None
    faces = np.frombuffer(data, dtype="<u4", count=3 * M, offset=_HEADER.size).reshape(M, 3)
    if int(faces.max()) >= N:
        raise DmbIndexOutOfRange(f"face index {int(faces.max())} >= N={N}")
    verts = np.frombuffer(data, dtype="<f4", count=3 * N * T, offset=faces_end).reshape(T, N, 3)
    mesh = DynamicMesh(faces.astype(np.int64), verts.astype(np.float32), caption)
    try:
        mesh.validate()
    except MeshValidationError as exc:
        raise DmbInvalidMesh(str(exc)) from None
    return mesh


def dmb_write(path: str | Path, mesh: DynamicMesh) -> None:
    Path(path).write_bytes(dmb_encode(mesh))


def dmb_read(path: str | Path) -> DynamicMesh:
    return dmb_decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Slicing, normalization, filtering


@dataclass
class Window:
    offset: int
    reversed: bool
    mesh: DynamicMesh


def iter_windows(animation: DynamicMesh, window: int) -> Iterator[Window]:
    """Non-overlapping windows from offset 0, then from ``window // 2``.

    Every window is followed by its frame-reversed copy; trailing frames that
    do not fill a whole window are dropped.
    """
    T = animation.num_frames
    for start in (0, window // 2):
        for off in range(start, T - window + 1, window):
            clip = animation.vertices[off : off + window]
            yield Window(off, False, DynamicMesh(animation.faces.copy(), clip.copy(), animation.caption))
            yield Window(off, True, DynamicMesh(animation.faces.copy(), clip[::-1].copy(), animation.caption))


def slice_windows(animation: DynamicMesh, window: int) -> list[DynamicMesh]:
    return [w.mesh for w in iter_windows(animation, window)]


def normalize_window(mesh: DynamicMesh) -> DynamicMesh:
    """Center frame 0's bounding box at the origin and scale its max |coord| to 1."""
    v = mesh.vertices.astype(np.float64)
    lo, hi = v[0].min(axis=0), v[0].max(axis=0)
    center = (lo + hi) / 2
    scale = np.abs(v[0] - center).max()
    if not scale > 0:
        raise MeshValidationError("frame 0 has zero extent")
    out = ((v - center) / scale).astype(np.float32)
    return DynamicMesh(mesh.faces.copy(), out, mesh.caption)


@dataclass(frozen=True)
class FilterResult:
    keep: bool
    reason: str | None = None
    value: float = 0.0

    def __bool__(self) -> bool:
        return self.keep


MOTION_RANGE = (0.01, 0.5)
MAX_FACE_RATIO = 2.5


def max_interframe_motion(mesh: DynamicMesh) -> float:
    v = mesh.vertices
    if v.shape[0] < 2:
        return 0.0
    return float(np.abs(np.diff(v, axis=0)).max())


def motion_filter(mesh: DynamicMesh, lo: float = MOTION_RANGE[0], hi: float = MOTION_RANGE[1]) -> FilterResult:
    """Keep iff ``lo <= m <= hi``; bounds are compared at the vertex dtype's precision."""
    m = max_interframe_motion(mesh)
    dt = mesh.vertices.dtype.type
    lo, hi = float(dt(lo)), float(dt(hi))
    if m < lo:
        return FilterResult(False, "motion-below-min", m)
    if m > hi:
        return FilterResult(False, "motion-above-max", m)
    return FilterResult(True, None, m)


def ratio_filter(mesh: DynamicMesh, limit: float = MAX_FACE_RATIO) -> FilterResult:
    r = mesh.num_faces / mesh.num_vertices
    if r > limit:
        return FilterResult(False, "face-ratio-exceeds", r)
    return FilterResult(True, None, r)


# ---------------------------------------------------------------------------
# Padded batching


@dataclass
class PaddedBatch:
    vertices: np.ndarray  # (B, T, Nmax, 3) float32
    faces: np.ndarray  # (B, Mmax, 3) int64, padding rows are -1
    valid_vertex_count: np.ndarray
    valid_face_count: np.ndarray
    captions: list


def max_faces_for(max_vertices: int) -> int:
    return math.ceil(MAX_FACE_RATIO * max_vertices)


def pad_batch(items: list[DynamicMesh], max_vertices: int | None = None) -> PaddedBatch:
    """Zero-pad vertices and -1-pad faces to a common size."""
    if not items:
        raise ValueError("empty batch")
    T = items[0].num_frames
    if any(m.num_frames != T for m in items):
        raise ValueError("all items in a batch need the same frame count")
    n_max = max(m.num_vertices for m in items)
    if max_vertices is not None:
        if max_vertices < n_max:
            raise ValueError(f"max_vertices={max_vertices} below largest item ({n_max})")
        n_max = max_vertices
    m_max = max_faces_for(n_max)
    B = len(items)
    verts = np.zeros((B, T, n_max, 3), dtype=np.float32)
    faces = np.full((B, m_max, 3), -1, dtype=np.int64)
    for b, m in enumerate(items):
        if m.num_faces > m_max:
            raise ValueError(f"item {b} has {m.num_faces} faces, more than Mmax={m_max}")
        verts[b, :, : m.num_vertices] = m.vertices
        faces[b, : m.num_faces] = m.faces
    return PaddedBatch(
        vertices=verts,
        faces=faces,
        valid_vertex_count=np.array([m.num_vertices for m in items]),
        valid_face_count=np.array([m.num_faces for m in items]),
        captions=[m.caption for m in items],
    )


# ---------------------------------------------------------------------------
# Corpus statistics


@dataclass
class CorpusStats:
    mu0: np.ndarray
    sigma0: np.ndarray
    muT: np.ndarray
    sigmaT: np.ndarray

    def __post_init__(self) -> None:
        for name in ("mu0", "sigma0", "muT", "sigmaT"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))
        if (self.sigma0 <= 0).any() or (self.sigmaT <= 0).any():
            raise ValueError("stddevs must be positive")


class RunningMoments:
    """Streaming per-channel mean/variance (Chan et al. pairwise merge)."""

    def __init__(self, channels: int):
        self.count = 0
        self.mean = np.zeros(channels, dtype=np.float64)
        self.m2 = np.zeros(channels, dtype=np.float64)

    def update(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, self.mean.shape[0])
        n = rows.shape[0]
        if n == 0:
            return
        b_mean = rows.mean(axis=0)
        b_m2 = ((rows - b_mean) ** 2).sum(axis=0)
        total = self.count + n
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + b_m2 + delta**2 * (self.count * n / total)
        self.count = total

    def std(self, floor: float = 1e-6) -> np.ndarray:
        return np.maximum(np.sqrt(self.m2 / max(self.count, 1)), floor)


STD_FLOOR = 1e-6


def stats_from_moments(m0: RunningMoments, mt: RunningMoments) -> CorpusStats:
    if m0.count == 0:
        raise ValueError("empty corpus")
    return CorpusStats(m0.mean, m0.std(STD_FLOOR), mt.mean, mt.std(STD_FLOOR))


def compute_stats(corpus: Iterable[DynamicMesh], model, n_tokens: int | None = None) -> CorpusStats:
    """Per-channel mean/std of shape tokens and posterior means over a corpus."""
    from .vae import encode

    m0 = mt = None
    for mesh in corpus:
        n = n_tokens or min(model.cfg.tokens, mesh.num_vertices)
        enc = encode(model, mesh, n)
        if m0 is None:
            m0 = RunningMoments(enc.v0_tokens.shape[-1])
            mt = RunningMoments(enc.mu.shape[-1])
        m0.update(enc.v0_tokens.numpy())
        mt.update(enc.mu.numpy())
    if m0 is None:
        raise ValueError("empty corpus")
    return stats_from_moments(m0, mt)


# stats file, little-endian:
#   b"DYST" | u16 version | u32 d0 | u32 dT | f32 mu0[d0] sigma0[d0] muT[dT] sigmaT[dT]
STATS_MAGIC = b"DYST"
_STATS_HEADER = struct.Struct("<4sHII")


def stats_encode(stats: CorpusStats) -> bytes:
    head = _STATS_HEADER.pack(STATS_MAGIC, 1, stats.mu0.size, stats.muT.size)
    body = b"".join(a.astype("<f4").tobytes() for a in (stats.mu0, stats.sigma0, stats.muT, stats.sigmaT))
    return head + body


def stats_decode(data: bytes) -> CorpusStats:
    if len(data) < _STATS_HEADER.size:
        raise ValueError("truncated stats file")
    magic, version, d0, dt = _STATS_HEADER.unpack_from(data)
    if magic != STATS_MAGIC or version != 1:
        raise ValueError("not a stats file")
    if len(data) != _STATS_HEADER.size + 4 * (2 * d0 + 2 * dt):
        raise ValueError("stats payload length mismatch")
    arr = np.frombuffer(data, dtype="<f4", offset=_STATS_HEADER.size).astype(np.float32)
    return CorpusStats(arr[:d0], arr[d0 : 2 * d0], arr[2 * d0 : 2 * d0 + dt], arr[2 * d0 + dt :])


def save_stats(path: str | Path, stats: CorpusStats) -> None:
    Path(path).write_bytes(stats_encode(stats))


def load_stats(path: str | Path) -> CorpusStats:
    return stats_decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Dataset build


def read_caption_sidecar(path: Path) -> str | None:
    side = path.with_suffix(".txt")
    return side.read_text(encoding="utf-8").strip() if side.exists() else None


def load_corpus(directory: str | Path) -> list[DynamicMesh]:
    """Read every .dmb in ``directory`` (sorted by name), attaching sidecar captions."""
    out = []
    for p in sorted(Path(directory).glob("*.dmb")):
        mesh = dmb_read(p)
        side = read_caption_sidecar(p)
        if side is not None:
            mesh.caption = side
        out.append(mesh)
    return out


@dataclass
class ManifestRecord:
    path: str
    N: int
    M: int
    T: int
    kept: bool
    reject_reason: str | None

    def to_json(self) -> str:
        return json.dumps(
            {"path": self.path, "N": self.N, "M": self.M, "T": self.T, "kept": self.kept, "reject_reason": self.reject_reason},
            sort_keys=True,
        )


def process_animation(name: str, animation: DynamicMesh, window: int, merge_tol: float = 0.0):
    """merge -> slice (+ reversed copies) -> normalize -> motion filter -> ratio filter.

    Yields ``(ManifestRecord, mesh)`` per window; ``mesh`` is None when rejected.
    """
    if animation.num_frames > MAX_FRAMES:
        animation = DynamicMesh(animation.faces, animation.vertices[:MAX_FRAMES], animation.caption)
    merged = merge_duplicate_vertices(animation, merge_tol)
    for w in iter_windows(merged, window):
        fname = f"{name}_w{window}_o{w.offset:04d}_{'rev' if w.reversed else 'fwd'}.dmb"
        try:
            mesh = normalize_window(w.mesh)
        except MeshValidationError:
            rec = ManifestRecord(fname, w.mesh.num_vertices, w.mesh.num_faces, window, False, "zero-extent")
            yield rec, None
            continue
        verdict = motion_filter(mesh)
        if verdict:
            verdict = ratio_filter(mesh)
        rec = ManifestRecord(fname, mesh.num_vertices, mesh.num_faces, window, verdict.keep, verdict.reason)
        yield rec, (mesh if verdict.keep else None)


def manifest_digest(records: Iterable[ManifestRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.to_json().encode() + b"\n")
    return h.hexdigest()
