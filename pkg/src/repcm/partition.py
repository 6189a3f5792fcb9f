"""Stage I: per-vertex motion descriptors, k-means regions, region adjacency."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.metrics import adjusted_rand_score

from .mesh import MeshSequence, MeshTopology, RegionPartition, ed_relative

PCA = "pca"
LEARNED = "learned"


@dataclass
class MotionDescriptorField:
    descriptors: np.ndarray  # (N, d)
    backend: str


def _check_cohort(cohort: Sequence[MeshSequence]):
    if not cohort:
        raise ValueError("cohort is empty")
    topo = cohort[0].topology
    t = cohort[0].n_frames
    for seq in cohort[1:]:
        if seq.n_frames != t:
            raise ValueError(f"subject {seq.subject_id} has {seq.n_frames} frames, expected {t}")
        if seq.topology is not topo and not np.array_equal(seq.topology.faces, topo.faces):
            raise ValueError(f"subject {seq.subject_id} has a different topology")


def flattened_trajectories(seq: MeshSequence) -> np.ndarray:
    """(N, 3T) rows: each vertex's ED-relative trajectory, frame-major."""
    traj = ed_relative(seq)
    return np.ascontiguousarray(traj.transpose(1, 0, 2).reshape(traj.shape[1], -1))


def mean_trajectories(cohort: Sequence[MeshSequence]) -> np.ndarray:
    _check_cohort(cohort)
    acc = np.zeros_like(flattened_trajectories(cohort[0]))
    for seq in cohort:
        acc += flattened_trajectories(seq)
    return acc / len(cohort)


def pca_descriptors(rows: np.ndarray, d: int) -> np.ndarray:
    """Project rows onto their top-``d`` principal directions.

    Component signs are fixed so the largest-magnitude loading is positive.
    Requested components beyond the data rank come out as zero columns.
    """
    if d < 1 or d > rows.shape[1]:
        raise ValueError(f"d must lie in [1, {rows.shape[1]}], got {d}")
    centered = rows - rows.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    flip = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    flip[flip == 0] = 1.0
    vt = vt * flip[:, None]
    out = centered @ vt[:d].T
    if out.shape[1] < d:
        out = np.pad(out, ((0, 0), (0, d - out.shape[1])))
    return out


def extract_motion_descriptors(
    cohort: Sequence[MeshSequence],
    backend: str = PCA,
    d: int = 16,
    encoder: Callable[[np.ndarray], np.ndarray] | None = None,
    seed: int = 0,
) -> MotionDescriptorField:
    """Vertex-wise motion descriptors shared across the cohort.

    ``pca`` projects the cohort-mean trajectory of every vertex. ``learned``
    embeds each subject's trajectories with ``encoder`` (trained on the fly
    when omitted) and averages the embeddings per vertex.
    """
    _check_cohort(cohort)
    if backend == PCA:
        return MotionDescriptorField(pca_descriptors(mean_trajectories(cohort), d), PCA)
    if backend == LEARNED:
        if encoder is None:
            from .training import DescriptorAEConfig, fit_descriptor_autoencoder

            encoder = fit_descriptor_autoencoder(cohort, d, DescriptorAEConfig(seed=seed))
        acc = None
        for seq in cohort:
            emb = np.asarray(encoder(flattened_trajectories(seq)), dtype=np.float64)
            acc = emb if acc is None else acc + emb
        desc = acc / len(cohort)
        if desc.shape[1] != d:
            raise ValueError(f"encoder returned {desc.shape[1]} dims, expected {d}")
        return MotionDescriptorField(desc, LEARNED)
    raise ValueError(f"unknown descriptor backend {backend!r}")


def _kmeans_pp(x: np.ndarray, r: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, r):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _sq_dists(x, centers):
    return (
        np.sum(x**2, axis=1)[:, None]
        - 2.0 * x @ centers.T
        + np.sum(centers**2, axis=1)[None]
    )


def cluster_regions(
    field: MotionDescriptorField | np.ndarray,
    r: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    n_init: int = 10,
) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; returns per-vertex region ids.

    ``n_init`` seedings are drawn from one generator built from ``seed`` and
    the lowest-inertia run is kept. Empty clusters are re-seeded with the
    point farthest from its centroid. Labels are renumbered by first
    occurrence so vertex 0 is always region 0.
    """
    x = np.asarray(field.descriptors if isinstance(field, MotionDescriptorField) else field,
                   dtype=np.float64)
    n = len(x)
    if not 1 <= r <= n:
        raise ValueError(f"r must lie in [1, {n}], got {r}")
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(max(1, n_init)):
        labels, inertia = _lloyd(x, _kmeans_pp(x, r, rng), max_iter, tol)
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    return _canonical_labels(best, r)


def _lloyd(x, centers, max_iter, tol):
    n, r = len(x), len(centers)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        labels = np.argmin(d2, axis=1)
        counts = np.bincount(labels, minlength=r)
        for g in np.flatnonzero(counts == 0):
            own = d2[np.arange(n), labels]
            own[counts[labels] <= 1] = -np.inf
            j = int(np.argmax(own))
            if not np.isfinite(own[j]):
                raise ValueError(f"cannot fill {r} clusters from {n} points")
            counts[labels[j]] -= 1
            labels[j] = g
            counts[g] = 1
        new = np.zeros_like(centers)
        np.add.at(new, labels, x)
        new /= counts[:, None]
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift < tol:
            break
    inertia = float(np.sum((x - centers[labels]) ** 2))
    return labels, inertia


def _canonical_labels(labels, r):
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(np.argsort(first))
    remap = np.empty(r, dtype=np.int64)
    remap[np.unique(labels)] = order
    return remap[labels]


def build_region_adjacency(assignment: np.ndarray, topology: MeshTopology,
                           r: int | None = None) -> np.ndarray:
    """Binary R x R matrix: 1 on the diagonal and wherever a mesh edge crosses regions."""
    a = np.asarray(assignment, dtype=np.int64)
    if len(a) != topology.vertex_count:
        raise ValueError(f"assignment covers {len(a)} vertices, topology has {topology.vertex_count}")
    r = int(a.max()) + 1 if r is None else r
    counts = np.bincount(a, minlength=r)
    if np.any(counts == 0):
        raise ValueError(f"region {int(np.argmin(counts))} has no vertices")
    adj = np.eye(r, dtype=np.uint8)
    e = topology.edges
    adj[a[e[:, 0]], a[e[:, 1]]] = 1
    adj[a[e[:, 1]], a[e[:, 0]]] = 1
    return adj


def functional_partition(
    cohort: Sequence[MeshSequence],
    r: int = 16,
    backend: str = PCA,
    d: int = 16,
    seed: int = 0,
    encoder=None,
) -> RegionPartition:
    """Full Stage I: descriptors -> k-means -> adjacency."""
    desc = extract_motion_descriptors(cohort, backend, d, encoder=encoder, seed=seed)
    assignment = cluster_regions(desc, r, seed)
    return RegionPartition(assignment, build_region_adjacency(assignment, cohort[0].topology, r))


def adjusted_rand_index(a, b) -> float:
    return float(adjusted_rand_score(np.asarray(a), np.asarray(b)))
