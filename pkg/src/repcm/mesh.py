"""Shared mesh types and pure geometry on fixed-topology bi-ventricular meshes."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property

import numpy as np

PHENOTYPES = ("NOR", "DCM", "HCM", "RV")


class Chamber(IntEnum):
    LV = 0
    RV = 1


@dataclass(frozen=True, eq=False)
class MeshTopology:
    """Triangle connectivity shared by every subject and every frame.

    Attributes:
        faces: (F, 3) vertex indices.
        chamber_labels: (N,) per-vertex chamber label (``Chamber`` values).
    """

    faces: np.ndarray
    chamber_labels: np.ndarray

    def __post_init__(self):
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        labels = np.ascontiguousarray(self.chamber_labels, dtype=np.uint8)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {faces.shape}")
        if labels.ndim != 1 or labels.size == 0:
            raise ValueError("chamber_labels must be a non-empty 1-D array")
        if faces.size and (faces.min() < 0 or faces.max() >= labels.size):
            raise ValueError("face index out of range [0, N)")
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "chamber_labels", labels)

    @property
    def vertex_count(self) -> int:
        return int(self.chamber_labels.size)

    @cached_property
    def edges(self) -> np.ndarray:
        """Undirected unique edges as an (E, 2) array with ``i < j``."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def chamber_faces(self, chamber: Chamber | int) -> np.ndarray:
        return self._chamber_cache[int(chamber)][0]

    @cached_property
    def _chamber_cache(self) -> dict:
        lab = self.chamber_labels[self.faces]
        out = {}
        for c in np.unique(self.chamber_labels).tolist() + [int(c) for c in Chamber]:
            f = self.faces[np.all(lab == c, axis=1)]
            out[c] = (f, boundary_edge_count(f))
        return out

    def chamber_mask(self, chamber: Chamber | int) -> np.ndarray:
        return self.chamber_labels == int(chamber)

    def boundary_edge_count(self, chamber: Chamber | int | None = None) -> int:
        faces = self.faces if chamber is None else self.chamber_faces(chamber)
        return boundary_edge_count(faces)


def boundary_edge_count(faces: np.ndarray) -> int:
    """Number of edges used by exactly one face (0 for a closed surface)."""
    if len(faces) == 0:
        return 0
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return int(np.sum(counts == 1))


@dataclass
class MeshSequence:
    """A T x N x 3 vertex trajectory over a shared topology. Frame 0 is ED."""

    frames: np.ndarray
    topology: MeshTopology
    phenotype: str = "NOR"
    subject_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3 or frames.shape[2] != 3 or frames.shape[0] < 1:
            raise ValueError(f"frames must be (T, N, 3) with T >= 1, got {frames.shape}")
        if frames.shape[1] != self.topology.vertex_count:
            raise ValueError(
                f"frames have {frames.shape[1]} vertices, topology has {self.topology.vertex_count}"
            )
        if not np.all(np.isfinite(frames)):
            raise ValueError(f"subject {self.subject_id!r}: non-finite coordinates")
        self.frames = frames

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def ed_frame(self) -> np.ndarray:
        return self.frames[0]


@dataclass(frozen=True, eq=False)
class RegionPartition:
    """Vertex-to-region assignment plus the binary region adjacency prior."""

    assignment: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        adj = np.asarray(self.adjacency, dtype=np.uint8)
        r = adj.shape[0]
        if adj.shape != (r, r):
            raise ValueError(f"adjacency must be square, got {adj.shape}")
        if a.min() < 0 or a.max() >= r:
            raise ValueError("assignment contains region ids outside [0, R)")
        counts = np.bincount(a, minlength=r)
        if np.any(counts == 0):
            raise ValueError(f"region {int(np.argmin(counts))} has no vertices")
        if not np.array_equal(adj, adj.T) or not np.all(np.diag(adj) == 1):
            raise ValueError("adjacency must be symmetric with unit diagonal")
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "adjacency", adj)

    @property
    def region_count(self) -> int:
        return int(self.adjacency.shape[0])


@dataclass(frozen=True, eq=False)
class AnchorSet:
    indices: np.ndarray
    region_ids: np.ndarray

    @classmethod
    def from_partition(cls, indices, partition: RegionPartition) -> AnchorSet:
        idx = np.asarray(indices, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise ValueError("anchor indices must be distinct")
        return cls(idx, partition.assignment[idx])

    def __len__(self):
        return len(self.indices)


def _frames_of(seq) -> np.ndarray:
    return seq.frames if isinstance(seq, MeshSequence) else np.asarray(seq)


def ed_relative(seq: MeshSequence | np.ndarray) -> np.ndarray:
    """Displacements of every frame relative to frame 0; ``out[0]`` is zero."""
    frames = _frames_of(seq)
    if frames.ndim != 3 or frames.shape[0] < 1 or frames.shape[-1] != 3:
        raise ValueError(f"expected (T, N, 3) frames, got {frames.shape}")
    return frames - frames[0:1]


def compose_frames(ed: np.ndarray, traj: np.ndarray) -> np.ndarray:
    """Add an ED-relative trajectory field back onto the ED frame."""
    ed = np.asarray(ed)
    traj = np.asarray(traj)
    if traj.ndim != 3 or traj.shape[1:] != ed.shape:
        raise ValueError(f"shape mismatch: ed {ed.shape}, trajectory {traj.shape}")
    return ed[None] + traj


def farthest_point_sampling(points: np.ndarray, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min subset selection.

    Each new index maximises the minimum distance to those already chosen; ties
    go to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        raise ValueError("empty point set")
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} outside [0, {n})")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start_index
    # squared distances: same argmax, exact on integer grids
    mind = np.sum((pts - pts[start_index]) ** 2, axis=1)
    mind[start_index] = -np.inf
    for i in range(1, k):
        j = int(np.argmax(mind))
        chosen[i] = j
        mind = np.minimum(mind, np.sum((pts - pts[j]) ** 2, axis=1))
        mind[chosen[: i + 1]] = -np.inf
    return chosen


def select_anchors(
    points: np.ndarray, k: int, partition: RegionPartition, start_index: int = 0
) -> AnchorSet:
    """FPS anchors that cover every region.

    Plain FPS is used when it already hits every region. Otherwise the greedy
    sweep is re-seeded with one vertex per region (the one closest to the
    region centroid) and continued to ``k``.
    """
    pts = np.asarray(points, dtype=np.float64)
    r = partition.region_count
    idx = farthest_point_sampling(pts, k, start_index)
    if len(np.unique(partition.assignment[idx])) == r:
        return AnchorSet.from_partition(idx, partition)
    if k < r:
        raise ValueError(f"{k} anchors cannot cover {r} regions")
    seeds = []
    for g in range(r):
        members = np.flatnonzero(partition.assignment == g)
        c = pts[members].mean(axis=0)
        seeds.append(int(members[np.argmin(np.sum((pts[members] - c) ** 2, axis=1))]))
    chosen = list(seeds)
    mind = np.min(np.sum((pts[:, None] - pts[seeds][None]) ** 2, axis=-1), axis=1)
    mind[seeds] = -np.inf
    while len(chosen) < k:
        j = int(np.argmax(mind))
        chosen.append(j)
        mind = np.minimum(mind, np.sum((pts - pts[j]) ** 2, axis=1))
        mind[chosen] = -np.inf
    return AnchorSet.from_partition(np.array(chosen), partition)


def signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)


def chamber_volume(frame: np.ndarray, topology: MeshTopology, chamber: Chamber | int) -> float:
    """Enclosed volume of one chamber's closed surface (mm^3 for mm input)."""
    faces, nb = topology._chamber_cache[int(chamber)]
    if len(faces) == 0:
        raise ValueError(f"chamber {Chamber(chamber).name} has no faces")
    if nb:
        raise ValueError(f"chamber {Chamber(chamber).name} surface is open ({nb} boundary edges)")
    return abs(signed_volume(frame, faces))


def uv_ellipsoid(n_rings: int, n_segments: int):
    """Closed latitude/longitude sphere mesh with poles on the z axis.

    Returns unit-sphere vertices, faces (outward orientation), and per-vertex
    polar angle ``theta`` (0 at +z) and azimuth ``phi``.
    """
    if n_rings < 2 or n_segments < 3:
        raise ValueError("need at least 2 rings and 3 segments")
    theta = np.concatenate([[0.0], np.repeat(np.arange(1, n_rings + 1) * np.pi / (n_rings + 1), n_segments), [np.pi]])
    phi = np.concatenate([[0.0], np.tile(np.arange(n_segments) * 2 * np.pi / n_segments, n_rings), [0.0]])
    verts = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=1)
    top, bottom = 0, 1 + n_rings * n_segments

    def ring(i, j):
        return 1 + i * n_segments + (j % n_segments)

    faces = []
    for j in range(n_segments):
        faces.append((top, ring(0, j), ring(0, j + 1)))
    for i in range(n_rings - 1):
        for j in range(n_segments):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    for j in range(n_segments):
        faces.append((bottom, ring(n_rings - 1, j + 1), ring(n_rings - 1, j)))
    return verts, np.array(faces, dtype=np.int64), theta, phi
