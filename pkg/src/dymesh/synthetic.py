"""Procedural animated meshes used as a desk-scale corpus.

The UV sphere keeps its seam and pole duplicates on purpose, so the merge
step of the dataset build has real work to do.
"""

from __future__ import annotations

import numpy as np

from .mesh import DynamicMesh


def uv_sphere(rings: int = 8, segments: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """Sphere with a duplicated seam column and duplicated pole rows."""
    theta = np.linspace(0, np.pi, rings + 1)
    phi = np.linspace(0, 2 * np.pi, segments + 1)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1).reshape(-1, 3)
    pts = np.round(pts, 12)
    faces = []
    w = segments + 1
    for i in range(rings):
        for j in range(segments):
            a, b = i * w + j, i * w + j + 1
            c, d = (i + 1) * w + j, (i + 1) * w + j + 1
            if i > 0:
                faces.append((a, c, b))
            if i < rings - 1:
                faces.append((b, c, d))
    return pts, np.asarray(faces)


def grid_sheet(nx: int, ny: int, sx: float = 1.0, sy: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    xs = np.linspace(-sx, sx, nx)
    ys = np.linspace(-sy, sy, ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X, Y, np.zeros_like(X)], -1).reshape(-1, 3)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b, c, d = i * ny + j, i * ny + j + 1, (i + 1) * ny + j, (i + 1) * ny + j + 1
            faces += [(a, c, b), (b, c, d)]
    return pts, np.asarray(faces)


def box_bar(n_len: int, length: float = 1.0, width: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Square tube along x made of ``n_len`` rings of 4 vertices, capped at both ends."""
    xs = np.linspace(-length, length, n_len)
    ring = np.array([[0, -1, -1], [0, 1, -1], [0, 1, 1], [0, -1, 1]], dtype=float) * [0, width, width]
    pts = np.concatenate([ring + [x, 0, 0] for x in xs])
    faces = []
    for i in range(n_len - 1):
        for k in range(4):
            a, b = i * 4 + k, i * 4 + (k + 1) % 4
            c, d = a + 4, b + 4
            faces += [(a, b, c), (b, d, c)]
    last = (n_len - 1) * 4
    faces += [(0, 2, 1), (0, 3, 2), (last, last + 1, last + 2), (last, last + 2, last + 3)]
    return pts, np.asarray(faces)


def _times(frames: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, frames)


def oscillating_sphere(frames: int, rng: np.random.Generator) -> DynamicMesh:
    pts, faces = uv_sphere(8, 12)
    freq = rng.uniform(0.8, 1.5)
    amp = rng.uniform(0.15, 0.3)
    drift = rng.normal(size=3) * 0.2
    t = _times(frames)[:, None, None]
    radial = 1 + amp * np.sin(2 * np.pi * freq * t + pts[None, :, 2:3] * 2)
    verts = pts[None] * radial + drift * t
    return DynamicMesh(faces, verts, "a sphere pulsing and drifting")


def waving_sheet(frames: int, rng: np.random.Generator) -> DynamicMesh:
    pts, faces = grid_sheet(10, 10)
    k = rng.uniform(1.5, 3.0)
    amp = rng.uniform(0.15, 0.3)
    t = _times(frames)[:, None]
    z = amp * np.sin(k * pts[None, :, 0] - 2 * np.pi * t) * (pts[None, :, 0] + 1) / 2
    verts = np.repeat(pts[None], frames, 0)
    verts[..., 2] = z
    return DynamicMesh(faces, verts, "a flag waving in the wind")


def twisting_bar(frames: int, rng: np.random.Generator) -> DynamicMesh:
    pts, faces = box_bar(20, 1.0, 0.25)
    angle = rng.uniform(0.6, 1.2) * np.pi / 2
    t = _times(frames)[:, None]
    a = angle * np.sin(np.pi * t) * pts[None, :, 0]
    c, s = np.cos(a), np.sin(a)
    verts = np.repeat(pts[None], frames, 0)
    y, z = pts[:, 1], pts[:, 2]
    verts[..., 1] = c * y - s * z
    verts[..., 2] = s * y + c * z
    return DynamicMesh(faces, verts, "a bar twisting back and forth")


def articulated_pair(frames: int, rng: np.random.Generator) -> DynamicMesh:
    """Two disconnected bars side by side, swinging in opposite directions."""
    bar, bfaces = box_bar(12, 1.0, 0.12)
    gap = rng.uniform(0.26, 0.3)
    left = bar + [0, -gap, 0]
    right = bar + [0, gap, 0]
    pts = np.concatenate([left, right])
    faces = np.concatenate([bfaces, bfaces + len(bar)])
    amp = rng.uniform(0.3, 0.5)
    t = _times(frames)[:, None]
    swing = amp * np.sin(2 * np.pi * t)
    lift = (pts[None, :, 0] + 1) / 2
    sign = np.where(np.arange(len(pts)) < len(bar), 1.0, -1.0)[None]
    verts = np.repeat(pts[None], frames, 0)
    verts[..., 2] += sign * swing * lift
    return DynamicMesh(faces, verts, "two arms swinging in opposite directions")


def touching_pair(frames: int, amp: float, width: float = 0.12) -> DynamicMesh:
    """Two bars whose inner faces share vertex positions but no edges.

    The coincident vertices are told apart only by connectivity.  Keep the
    result away from duplicate merging, which would weld the bars together.
    """
    bar, bfaces = box_bar(12, 1.0, width)
    pts = np.concatenate([bar + [0, -width, 0], bar + [0, width, 0]])
    faces = np.concatenate([bfaces, bfaces + len(bar)])
    t = _times(frames)[:, None]
    sign = np.where(np.arange(len(pts)) < len(bar), 1.0, -1.0)[None]
    verts = np.repeat(pts[None], frames, 0)
    verts[..., 2] += sign * amp * np.sin(2 * np.pi * t) * (pts[None, :, 0] + 1) / 2
    return DynamicMesh(faces, verts.astype(np.float32), "two touching arms swinging apart")


GENERATORS = {
    "oscillating-sphere": oscillating_sphere,
    "waving-sheet": waving_sheet,
    "twisting-bar": twisting_bar,
    "articulated-pair": articulated_pair,
}


def generate(kind: str, count: int, frames: int, seed: int = 0) -> list[DynamicMesh]:
    if kind not in GENERATORS:
        raise KeyError(f"unknown generator {kind!r}; choose from {sorted(GENERATORS)}")
    rng = np.random.default_rng([seed, sorted(GENERATORS).index(kind)])
    out = []
    for _ in range(count):
        m = GENERATORS[kind](frames, rng)
        m.vertices = m.vertices.astype(np.float32)
        out.append(m)
    return out


def parse_generator_spec(spec: str) -> tuple[str, int, int]:
    """``"oscillating-sphere:4:32"`` -> (kind, count, frames)."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ValueError(f"generator spec must be kind:count:frames, got {spec!r}")
    return parts[0], int(parts[1]), int(parts[2])


def desk_corpus(frames: int = 16, seed: int = 0) -> list[DynamicMesh]:
    """Eight normalized training windows, two of each generator kind (merged, <=200 vertices)."""
    from .data import normalize_window
    from .mesh import merge_duplicate_vertices

    meshes = []
    for kind in ("articulated-pair", "oscillating-sphere", "twisting-bar", "waving-sheet"):
        for m in generate(kind, 2, frames, seed):
            meshes.append(normalize_window(merge_duplicate_vertices(m)))
    return meshes
