import json

import numpy as np
import pytest

from repcm.cli import RunConfig, main
from repcm.container import load_cohort

CONFIG = {
    "seed": 3,
    "data": {"n_per_phenotype": 3, "mesh_rings": 8, "mesh_segments": 10},
    "model": {"anchors": 16, "channels": 16, "encoder_layers": 1, "decoder_layers": 1,
              "regions": 4, "heads": 2},
    "train": {"max_epochs": 2, "batch_size": 4},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(CONFIG))
    c = ["--config", str(cfg)]
    assert main(["generate-data", *c, "--out", str(root / "data")]) == 0
    assert main(["partition", *c, "--data", str(root / "data"), "--out", str(root / "part")]) == 0
    assert main(["train", *c, "--data", str(root / "data"), "--partition", str(root / "part"),
                 "--out", str(root / "ckpt")]) == 0
    return root, c


def _complete(root, c, out, *extra):
    return main(["complete", *c, "--checkpoint", str(root / "ckpt"), "--partition", str(root / "part"),
                 "--data", str(root / "data"), "--out", str(root / out), *extra])


def test_outputs_and_run_configs(pipeline):
    root, _ = pipeline
    for d in ("data", "part", "ckpt"):
        doc = json.loads((root / d / "run_config.json").read_text())
        assert RunConfig.from_dict(doc).to_dict() == doc
    assert (root / "part" / "partition.json").exists()
    assert {"model.pt", "config.json", "train.log.jsonl"} <= {p.name for p in (root / "ckpt").iterdir()}


def test_complete_zero_noise_is_deterministic(pipeline):
    root, c = pipeline
    assert _complete(root, c, "p1", "--subjects", "NOR_000,DCM_001") == 0
    assert _complete(root, c, "p2", "--subjects", "NOR_000,DCM_001") == 0
    for sid in ("NOR_000", "DCM_001"):
        a = (root / "p1" / f"{sid}.traj.bin").read_bytes()
        assert a == (root / "p2" / f"{sid}.traj.bin").read_bytes()
    manifest = json.loads((root / "p1" / "manifest.json").read_text())
    assert all(abs(sum(s["gates"]) - 1) < 1e-6 for s in manifest["subjects"])


def test_complete_sampled_noise_depends_on_seed(pipeline):
    root, c = pipeline
    assert _complete(root, c, "s1", "--subjects", "NOR_000", "--noise", "sample", "--seed", "1") == 0
    assert _complete(root, c, "s2", "--subjects", "NOR_000", "--noise", "sample", "--seed", "1") == 0
    assert _complete(root, c, "s3", "--subjects", "NOR_000", "--noise", "sample", "--seed", "2") == 0
    read = lambda d: (root / d / "NOR_000.traj.bin").read_bytes()
    assert read("s1") == read("s2") and read("s1") != read("s3")


def test_complete_refuses_other_partition(pipeline, capsys):
    root, c = pipeline
    assert main(["partition", *c, "--seed", "99", "--regions", "3", "--data", str(root / "data"),
                 "--out", str(root / "other")]) == 0
    capsys.readouterr()
    code = main(["complete", *c, "--checkpoint", str(root / "ckpt"), "--partition", str(root / "other"),
                 "--data", str(root / "data"), "--out", str(root / "bad")])
    err = capsys.readouterr().err.strip()
    assert code != 0 and "differs" in err and len(err.splitlines()) == 1


def test_evaluate_truth_gives_zero_and_plot(pipeline, capsys):
    root, c = pipeline
    assert main(["evaluate", *c, "--predictions", str(root / "data"), "--data", str(root / "data"),
                 "--out", str(root / "rep")]) == 0
    report = json.loads((root / "rep" / "report.json").read_text())
    assert all(v["mean"] == 0.0 for v in report["summary"].values())
    assert main(["plot", *c, "--report", str(root / "rep"), "--out", str(root / "figs")]) == 0
    assert (root / "figs" / "volume_curves.png").exists()


def test_evaluate_predictions(pipeline):
    root, c = pipeline
    assert _complete(root, c, "pt", "--split", "test") == 0
    assert main(["evaluate", *c, "--predictions", str(root / "pt"), "--data", str(root / "data"),
                 "--out", str(root / "rep2")]) == 0
    report = json.loads((root / "rep2" / "report.json").read_text())
    assert len(report["subjects"]) == len(load_cohort(root / "data", split="test"))
    assert report["usage"] is not None
    assert all(v["mean"] > 0 for v in report["summary"].values())


def test_unknown_config_key_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"anchor_count": 3}}))
    assert main(["generate-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "anchor_count" in capsys.readouterr().err


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "none"), "--partition", str(tmp_path / "p.json"),
                 "--out", str(tmp_path / "o")]) == 1
    assert main(["evaluate", "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 2 and all(line.startswith("repcm ") for line in err)


def test_invalid_flag_value_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--mask-mode", "multiply"])
    assert exc.value.code != 0


def test_overrides_land_in_run_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": {"n_per_phenotype": 1, "mesh_rings": 8, "mesh_segments": 10}}))
    assert main(["generate-data", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "d")]) == 0
    doc = json.loads((tmp_path / "d" / "run_config.json").read_text())
    assert doc["seed"] == 5 and doc["paths"]["out"] == str(tmp_path / "d")
    # replaying the written config reproduces the data bit-for-bit
    assert main(["generate-data", "--config", str(tmp_path / "d" / "run_config.json"),
                 "--out", str(tmp_path / "e")]) == 0
    for p in (tmp_path / "d").glob("*.bin"):
        assert p.read_bytes() == (tmp_path / "e" / p.name).read_bytes()
    np.testing.assert_array_equal(load_cohort(tmp_path / "d")[0].frames, load_cohort(tmp_path / "e")[0].frames)
