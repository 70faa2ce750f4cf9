"""Dynamic mesh representation, connectivity and farthest point sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshValidationError(ValueError):
    """Raised when a mesh or a mesh-derived structure violates its invariants."""


@dataclass
class DynamicMesh:
    """Fixed-topology triangle mesh animated over ``T`` frames.

    Parameters
    ----------
    faces : (M, 3) int array
        Vertex indices of each triangle.
    vertices : (T, N, 3) float32 array
        Per-frame vertex positions.
    caption : str, optional
        Free-text description of the motion.
    """

    faces: np.ndarray
    vertices: np.ndarray
    caption: str | None = None

    def __post_init__(self) -> None:
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        verts = np.asarray(self.vertices, dtype=np.float32)
        if verts.ndim == 2:
            verts = verts[None]
        self.vertices = verts

    @property
    def num_frames(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[1]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def validate(self) -> DynamicMesh:
        if self.vertices.ndim != 3 or self.vertices.shape[2] != 3:
            raise MeshValidationError(f"vertices must be T x N x 3, got {self.vertices.shape}")
        T, N, _ = self.vertices.shape
        if T < 1:
            raise MeshValidationError("need at least one frame")
        if N < 3:
            raise MeshValidationError(f"need at least 3 vertices, got {N}")
        if self.num_faces < 1:
            raise MeshValidationError("need at least one face")
        if self.faces.min() < 0 or self.faces.max() >= N:
            raise MeshValidationError("face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshValidationError("face with repeated vertex index")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshValidationError("non-finite vertex coordinate")
        return self

    def first_frame(self) -> DynamicMesh:
        return DynamicMesh(self.faces.copy(), self.vertices[:1].copy(), self.caption)


@dataclass
class TrajectoryDecomposition:
    """Initial-frame positions ``v0`` (N, 3) and offsets ``vt`` (T, N, 3)."""

    v0: np.ndarray
    vt: np.ndarray


@dataclass
class AdjacencyMask:
    """Reflexive, symmetric vertex connectivity induced by triangle faces."""

    n: int
    dense: np.ndarray = field(repr=False)

    def __call__(self, i: int, j: int) -> bool:
        return bool(self.dense[i, j])

    def edge_count(self) -> int:
        return int(self.dense.sum() - self.n) // 2


@dataclass
class FpsSelection:
    indices: np.ndarray
    seed_index: int = 0


def merge_duplicate_vertices(mesh: DynamicMesh, tol: float = 0.0) -> DynamicMesh:
    """Merge vertices whose frame-0 positions coincide within ``tol`` per coordinate.

    Each duplicate maps onto its lowest-index twin, whose trajectory is kept.
    Faces are reindexed; faces that become degenerate and repeated faces
    (same vertex set) are dropped.
    """
    mesh.validate()
    p0 = mesh.vertices[0].astype(np.float64)
    N = p0.shape[0]
    if tol <= 0:
        _, first, inverse = np.unique(p0, axis=0, return_index=True, return_inverse=True)
        canonical = first[inverse.reshape(-1)]
    else:
        from scipy.spatial import cKDTree

        tree = cKDTree(p0)
        canonical = np.arange(N)
        for i in range(N):
            if canonical[i] != i:
                continue
            for j in tree.query_ball_point(p0[i], r=tol, p=np.inf):
                if j > i and canonical[j] == j:
                    canonical[j] = i

    keep = np.flatnonzero(canonical == np.arange(N))
    if keep.size == N:
        remap_faces = mesh.faces
    else:
        new_index = np.full(N, -1, dtype=np.int64)
        new_index[keep] = np.arange(keep.size)
        remap_faces = new_index[canonical[mesh.faces]]

    f = remap_faces
    ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    f = f[ok]
    if f.shape[0] == 0:
        raise MeshValidationError("all faces degenerate after merging")
    _, first_face = np.unique(np.sort(f, axis=1), axis=0, return_index=True)
    f = f[np.sort(first_face)]
    if keep.size == N and f.shape[0] == mesh.num_faces:
        return DynamicMesh(mesh.faces.copy(), mesh.vertices.copy(), mesh.caption)
    return DynamicMesh(f, mesh.vertices[:, keep].copy(), mesh.caption)


def build_adjacency(faces: np.ndarray, n: int) -> AdjacencyMask:
    """Connectivity mask from faces; rows with a negative index (padding) are ignored."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    faces = faces[(faces >= 0).all(axis=1)]
    if faces.size and faces.max() >= n:
        raise MeshValidationError(f"face index {faces.max()} out of range for n={n}")
    adj = np.eye(n, dtype=bool)
    for a, b in ((0, 1), (1, 2), (0, 2)):
        adj[faces[:, a], faces[:, b]] = True
        adj[faces[:, b], faces[:, a]] = True
    return AdjacencyMask(n=n, dense=adj)


def decompose(mesh: DynamicMesh) -> TrajectoryDecomposition:
    v = mesh.vertices
    v0 = v[0].copy()
    vt = v - v0[None]
    vt[0] = 0.0
    return TrajectoryDecomposition(v0=v0, vt=vt)


def recompose(d: TrajectoryDecomposition) -> np.ndarray:
    v0 = np.asarray(d.v0)
    vt = np.asarray(d.vt)
    if v0.ndim != 2 or vt.ndim != 3 or vt.shape[1:] != v0.shape:
        raise MeshValidationError(f"shape mismatch: v0 {v0.shape} vs vt {vt.shape}")
    return v0[None] + vt


def farthest_point_sampling(features: np.ndarray, n: int, seed_index: int = 0) -> FpsSelection:
    """Greedy max-min selection of ``n`` rows of ``features`` (Euclidean distance).

    Deterministic; ties resolve to the lowest index.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    N = x.shape[0]
    if not 1 <= n <= N:
        raise MeshValidationError(f"cannot select {n} of {N} points")
    if not 0 <= seed_index < N:
        raise MeshValidationError(f"seed index {seed_index} out of range")
    idx = np.empty(n, dtype=np.int64)
    idx[0] = seed_index
    min_d = ((x - x[seed_index]) ** 2).sum(axis=1)
    min_d[seed_index] = -1.0
    for k in range(1, n):
        nxt = int(np.argmax(min_d))
        idx[k] = nxt
        np.minimum(min_d, ((x - x[nxt]) ** 2).sum(axis=1), out=min_d)
        # -1 survives every later minimum, so a selected point never wins again
        min_d[nxt] = -1.0
    return FpsSelection(indices=idx, seed_index=seed_index)
