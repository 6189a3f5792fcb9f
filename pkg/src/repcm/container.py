"""On-disk cohort container and partition file.

Layout of a cohort directory::

    manifest.json          topology file name, T, N, optional R, subject list
    topology.bin           uint32 N, uint32 F, F*3 uint32 faces, N uint8 labels
    <SUBJECT>.traj.bin     uint32 T, uint32 N, T*N*3 float32 coordinates

All binary data is little-endian.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .mesh import MeshSequence, MeshTopology, RegionPartition

MANIFEST = "manifest.json"
TOPOLOGY = "topology.bin"


def write_topology(path, topology: MeshTopology) -> None:
    n, f = topology.vertex_count, len(topology.faces)
    with open(path, "wb") as fh:
        fh.write(np.array([n, f], dtype="<u4").tobytes())
        fh.write(topology.faces.astype("<u4").tobytes())
        fh.write(topology.chamber_labels.astype("u1").tobytes())


def read_topology(path) -> MeshTopology:
    raw = Path(path).read_bytes()
    n, f = np.frombuffer(raw, dtype="<u4", count=2)
    n, f = int(n), int(f)
    expected = 8 + 12 * f + n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    faces = np.frombuffer(raw, dtype="<u4", count=3 * f, offset=8).reshape(f, 3)
    labels = np.frombuffer(raw, dtype="u1", count=n, offset=8 + 12 * f)
    return MeshTopology(faces.astype(np.int64), labels.copy())


def write_frames(path, frames: np.ndarray) -> None:
    t, n, _ = frames.shape
    with open(path, "wb") as fh:
        fh.write(np.array([t, n], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_frames(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    t, n = (int(x) for x in np.frombuffer(raw, dtype="<u4", count=2))
    if len(raw) != 8 + 12 * t * n:
        raise ValueError(f"{path}: truncated trajectory file")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(t, n, 3).astype(np.float64)


def save_cohort(directory, cohort: list[MeshSequence], extra: dict | None = None,
                subject_extra: dict | None = None) -> Path:
    """Write a cohort. ``subject_extra`` maps subject id to additional manifest fields."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not cohort:
        raise ValueError("cannot save an empty cohort")
    topo = cohort[0].topology
    write_topology(directory / TOPOLOGY, topo)
    subjects = []
    for seq in cohort:
        if seq.topology is not topo and not np.array_equal(seq.topology.faces, topo.faces):
            raise ValueError(f"subject {seq.subject_id} has a different topology")
        write_frames(directory / f"{seq.subject_id}.traj.bin", seq.frames)
        entry = {"id": seq.subject_id, "phenotype": seq.phenotype}
        entry.update((subject_extra or {}).get(seq.subject_id, {}))
        subjects.append(entry)
    manifest = {
        "topology": TOPOLOGY,
        "T": int(cohort[0].n_frames),
        "N": topo.vertex_count,
        "subjects": subjects,
    }
    manifest.update(extra or {})
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    return json.loads(path.read_text())


def load_cohort(directory, subjects: list[str] | None = None,
                split: str | None = None) -> list[MeshSequence]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    topo = read_topology(directory / manifest["topology"])
    out = []
    for entry in manifest["subjects"]:
        if subjects is not None and entry["id"] not in subjects:
            continue
        if split is not None and entry.get("split") != split:
            continue
        frames = read_frames(directory / f"{entry['id']}.traj.bin")
        if frames.shape[0] != manifest["T"] or frames.shape[1] != manifest["N"]:
            raise ValueError(f"subject {entry['id']}: shape {frames.shape} disagrees with manifest")
        meta = {k: v for k, v in entry.items() if k not in ("id", "phenotype")}
        out.append(MeshSequence(frames, topo, entry["phenotype"], entry["id"], meta))
    return out


def partition_to_json(partition: RegionPartition, seed: int, backend: str) -> str:
    doc = {
        "R": partition.region_count,
        "assignment": partition.assignment.tolist(),
        "adjacency": partition.adjacency.tolist(),
        "seed": int(seed),
        "backend": backend,
    }
    return json.dumps(doc, sort_keys=True)


def save_partition(path, partition: RegionPartition, seed: int, backend: str) -> str:
    """Write ``partition.json``; returns its sha256 hex digest."""
    text = partition_to_json(partition, seed, backend)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_partition(path) -> tuple[RegionPartition, dict]:
    doc = json.loads(Path(path).read_text())
    part = RegionPartition(np.array(doc["assignment"]), np.array(doc["adjacency"]))
    if part.region_count != doc["R"]:
        raise ValueError(f"{path}: R={doc['R']} disagrees with adjacency size {part.region_count}")
    return part, doc


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
