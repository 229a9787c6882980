import json

import numpy as np
import pytest

from vprdistill.evalcli.cli import cli_main
from vprdistill.evalcli.experiment import CACHE_ENV, resolve_config
from vprdistill.errors import ConfigError

FAST = ["--epochs", "1", "--batch-size", "4", "--image-size", "32x32"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli_main(["synth-gen", "--out", str(out), "--n-places", "8", "--seed", "1"]) == 0
    return out


def test_synth_gen_writes_manifests(synth_dir):
    for name in ("train", "val", "test"):
        assert (synth_dir / f"{name}.csv").exists()


def test_full_cli_pipeline(synth_dir, tmp_path, capsys):
    tr, va, te = (str(synth_dir / f"{n}.csv") for n in ("train", "val", "test"))
    run = tmp_path / "runs"
    for branch in ("rgb", "seg"):
        assert cli_main(["train-stage1", "--branch", branch, "--train", tr, "--val", va,
                         "--out", str(run / branch), *FAST]) == 0
    part = run / "partition.csv"
    assert cli_main(["partition", "--train", tr, "--seg-ckpt", str(run / "seg" / "model.ckpt"),
                     "--rgb-ckpt", str(run / "rgb" / "model.ckpt"), "--out", str(part),
                     "--image-size", "32x32"]) == 0
    assert json.loads(part.with_name("partition.csv.json").read_text())["N_t"] == 10
    assert cli_main(["train-stage2", "--train", tr, "--val", va, "--teacher", str(run / "seg" / "model.ckpt"),
                     "--partition", str(part), "--weight-scheme", "const:8,4,1,0", "--strict-provenance",
                     "--out", str(run / "student"), *FAST]) == 0
    capsys.readouterr()
    assert cli_main(["eval", "--checkpoint", str(run / "student" / "model.ckpt"), "--manifest", te,
                     "--ns", "1,5,10", "--out", str(tmp_path / "rep"), "--image-size", "32x32",
                     "--save-descriptors", str(tmp_path / "desc.bin")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc["recall"]) == {"R@1", "R@5", "R@10"}
    rows = (tmp_path / "rep.csv").read_text().splitlines()
    assert len(rows) == 4
    assert (tmp_path / "desc.bin").exists()
    assert cli_main(["bench", "--checkpoint", str(run / "student" / "model.ckpt"), "--manifest", te,
                     "--reps", "2", "--image-size", "32x32"]) == 0
    assert cli_main(["train-baseline", "--mode", "concat_feat", "--train", tr, "--val", va,
                     "--out", str(run / "cf"), *FAST]) == 0


def test_stage2_provenance_mismatch_exit_code(synth_dir, tmp_path, capsys):
    from vprdistill.dataset import load_manifest, mine_positives, GroundTruthConfig
    from vprdistill.model import BackboneConfig, DescriptorNet, save_checkpoint
    from vprdistill.partition import RecallRanking, partition, save_partition

    recs = load_manifest(synth_dir / "train.csv")
    pairs = mine_positives(recs, GroundTruthConfig())
    table = partition(RecallRanking({p: 1 for p in pairs}, "seg"), RecallRanking({p: 1 for p in pairs}, "rgb"),
                      digests={"seg": "not-this-one"})
    save_partition(table, tmp_path / "p.csv")
    save_checkpoint(DescriptorNet(BackboneConfig.seg_light(), ("seg",), branch="seg"), tmp_path / "t.ckpt")
    code = cli_main(["train-stage2", "--train", str(synth_dir / "train.csv"), "--val", str(synth_dir / "val.csv"),
                     "--teacher", str(tmp_path / "t.ckpt"), "--partition", str(tmp_path / "p.csv"),
                     "--strict-provenance", "--out", str(tmp_path / "s"), *FAST])
    assert code == 5
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ProvenanceError"


def test_encode_slme(tmp_path, synth_dir):
    label = next((synth_dir / "labels").iterdir())
    out = tmp_path / "enc.npy"
    assert cli_main(["encode-slme", "--input", str(label), "--out", str(out), "--slme-scheme", "three",
                     "--save-scheme", str(tmp_path / "s.json")]) == 0
    arr = np.load(out)
    assert arr.shape[0] == 3
    assert json.loads((tmp_path / "s.json").read_text())["C"] == 3


def test_usage_and_schema_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli_main(["eval", "--bogus"])
    assert exc.value.code == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"stage1": {"epochz": 3}}))
    assert cli_main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and "epochz" in err["message"]
    assert cli_main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--manifest", str(cfg)]) != 0


def test_resolve_config_overrides():
    cfg = resolve_config({"stage2": {"epochs": 3}, "schemes": ["eq4"]}, seed=9)
    assert cfg["seeds"] == [9]
    assert cfg["stage2"]["epochs"] == 3 and "lr" in cfg["stage2"]
    with pytest.raises(ConfigError):
        resolve_config({"datasets": {}})
    with pytest.raises(ConfigError):
        resolve_config({"schemes": ["eq5"]})


def test_experiment_smoke_and_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "cache"))
    cfg = {
        "dataset": {"synth": {"n_places": 10, "image_size": [32, 32]}, "image_size": [32, 32]},
        "stage1": {"epochs": 1, "batch_size": 4},
        "stage2": {"epochs": 1, "batch_size": 4},
        "schemes": ["none", "eq4"],
    }
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    for out in ("a", "b"):
        assert cli_main(["experiment", "--config", str(path), "--out", str(tmp_path / out), "--seed", "0"]) == 0
    for name in ("report.json", "report.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert set(rep["summary"]) == {"rgb", "seg", "student/none", "student/eq4"}
    assert (tmp_path / "a" / "timings.json").exists()
    assert any((tmp_path / "cache" / "synth").iterdir())
