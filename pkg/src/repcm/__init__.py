"""Bi-ventricular cardiac motion completion from a single end-diastolic mesh."""

from .mesh import (
    PHENOTYPES,
    AnchorSet,
    Chamber,
    MeshSequence,
    MeshTopology,
    RegionPartition,
    chamber_volume,
    farthest_point_sampling,
    select_anchors,
)

__version__ = "0.1.0"

__all__ = [
    "PHENOTYPES",
    "AnchorSet",
    "Chamber",
    "MeshSequence",
    "MeshTopology",
    "RegionPartition",
    "chamber_volume",
    "farthest_point_sampling",
    "select_anchors",
]
