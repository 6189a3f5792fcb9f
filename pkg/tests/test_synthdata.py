import json

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from repcm.container import load_cohort
from repcm.mesh import PHENOTYPES, Chamber
from repcm.metrics import volume_curve
from repcm.synthdata import (
    N_FRAMES,
    RegionGrid,
    default_programs,
    generate_cohort,
    split_subjects,
    write_cohort,
)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(3, seed=11)


def test_programs_are_valid_and_distinct():
    progs = default_programs()
    assert list(progs) == list(PHENOTYPES)
    for p in progs.values():
        assert np.all(np.asarray(p.amplitudes) >= 0)
        assert np.all((np.asarray(p.phases) >= 0) & (np.asarray(p.phases) < 1))
    keys = [json.dumps(p.__dict__, default=list, sort_keys=True) for p in progs.values()]
    assert len(set(keys)) == 4


def test_same_seed_bit_identical():
    a = generate_cohort(1, seed=5, mesh_resolution=(8, 10))
    b = generate_cohort(1, seed=5, mesh_resolution=(8, 10))
    for x, y in zip(a.sequences, b.sequences):
        assert np.array_equal(x.frames, y.frames)


def test_shapes_closed_and_ed_is_max(cohort):
    topo = cohort.sequences[0].topology
    assert topo.boundary_edge_count(Chamber.LV) == 0 and topo.boundary_edge_count(Chamber.RV) == 0
    assert 900 <= topo.vertex_count <= 1100
    for seq in cohort.sequences:
        assert seq.frames.shape[0] == N_FRAMES
        for ch in Chamber:
            assert np.argmax(volume_curve(seq.frames, topo, ch)) == 0


def test_nor_minimum_at_programmed_end_systole(cohort):
    for seq in cohort.sequences:
        if seq.phenotype == "NOR":
            curve = volume_curve(seq.frames, seq.topology, Chamber.LV)
            assert int(np.argmin(curve)) == seq.meta["es_frame"]


def test_dcm_ejection_fraction_below_nor():
    c = generate_cohort(5, seed=2)
    ef = {s.subject_id: s.meta["lv_ef"] for s in c.sequences}
    for i in range(5):
        assert ef[f"DCM_{i:03d}"] < ef[f"NOR_{i:03d}"]


def test_planted_partition_and_resolution_check():
    c = generate_cohort(1, grid=RegionGrid(2, 2), mesh_resolution=(8, 10))
    assert c.planted.region_count == 8
    with pytest.raises(ValueError):
        generate_cohort(1, grid=RegionGrid(8, 8), mesh_resolution=(4, 6))
    with pytest.raises(ValueError):
        generate_cohort(0)


def test_phenotypes_linearly_separable():
    c = generate_cohort(100, seed=0, mesh_resolution=(10, 12))
    feats = np.array([[s.meta[k] for k in ("lv_ef", "rv_ef", "lv_edv", "rv_edv", "wall_thickness")]
                      for s in c.sequences])
    labels = [s.phenotype for s in c.sequences]
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000)).fit(feats, labels)
    assert clf.score(feats, labels) >= 0.95


def test_split_is_stratified_and_seeded():
    split = split_subjects(generate_cohort(10, mesh_resolution=(8, 8)).sequences, seed=0)
    counts = {}
    for sid, part in split.items():
        counts.setdefault((sid[:3].rstrip("_"), part), 0)
        counts[(sid[:3].rstrip("_"), part)] += 1
    for ph in PHENOTYPES:
        assert (counts[(ph, "train")], counts[(ph, "val")], counts[(ph, "test")]) == (7, 1, 2)
    assert split == split_subjects(generate_cohort(10, mesh_resolution=(8, 8)).sequences, seed=0)


def test_write_cohort_round_trip(tmp_path):
    c = generate_cohort(1, mesh_resolution=(8, 10), seed=3)
    write_cohort(tmp_path, c)
    progs = json.loads((tmp_path / "programs.json").read_text())
    assert set(progs) == set(PHENOTYPES)
    back = load_cohort(tmp_path)
    assert [s.subject_id for s in back] == [s.subject_id for s in c.sequences]
    np.testing.assert_allclose(back[0].frames, c.sequences[0].frames, atol=1e-4)
    assert back[0].meta["es_frame"] == c.sequences[0].meta["es_frame"]
