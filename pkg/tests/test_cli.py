import json
from pathlib import Path

import numpy as np
import pytest

from mkdiff.cli import RunConfig, parse_config, run_command
from mkdiff.pointset import load_cloud, load_manifest
from mkdiff.tasks import PAPER_SIGMAS, load_checkpoint


def run(*args) -> int:
    return run_command(list(args))


FAST = ["--k", "6", "--t", "2", "--sigmas", "0.1,0.4", "--epochs", "2",
        "--lr", "0.001", "--hidden-width", "8", "--n-layers", "1",
        "--dropout-p", "0.0", "--triplets-per-step", "64",
        "--descriptor-dim", "6", "--seed", "3"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    assert run("synth", "--shapes", "8", "--points", "200", "--seed", "5",
               "--poses-per-subject", "2", "--out", str(root)) == 0
    return root


@pytest.fixture(scope="module")
def seg_ckpt(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_seg")
    assert run("train-seg", "--manifest", str(dataset / "manifest.json"),
               "--out", str(out), *FAST) == 0
    return out / "checkpoint.mkdc"


@pytest.fixture(scope="module")
def desc_ckpt(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_desc")
    assert run("train-desc", "--manifest", str(dataset / "manifest.json"),
               "--out", str(out), *FAST) == 0
    return out / "checkpoint.mkdc"


# --- config handling ---------------------------------------------------------


def test_defaults_mirror_reference_configuration():
    cfg = parse_config(None, {})
    assert cfg.k == 100 and cfg.t == 7
    assert cfg.sigmas == PAPER_SIGMAS
    assert cfg.n_layers == 4 and cfg.epochs == 50
    assert cfg.lr == 1e-4 and cfg.margin == 0.2 and cfg.descriptor_dim == 16
    assert cfg.triplets_per_step == 6890


def test_default_sweep_grids_match_reference_protocol():
    from mkdiff.cli import _DEFAULT_GRIDS
    assert _DEFAULT_GRIDS["noise"][1:] == (0.01, 0.02, 0.03, 0.04, 0.05)
    assert 0.5 in _DEFAULT_GRIDS["missing"]
    assert 0.5 in _DEFAULT_GRIDS["outlier"]


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"k": 100, "epochs": 9}')
    cfg = parse_config(path, {"k": 5})
    assert cfg.k == 5
    assert cfg.epochs == 9


def test_unknown_and_mistyped_keys_rejected(tmp_path):
    from mkdiff.cli import UsageError
    path = tmp_path / "c.json"
    path.write_text('{"frobnicate": 1}')
    with pytest.raises(UsageError, match="frobnicate"):
        parse_config(path, {})
    path.write_text('{"k": "many"}')
    with pytest.raises(UsageError, match="'k'"):
        parse_config(path, {})
    path.write_text('{"sigmas": "wide"}')
    with pytest.raises(UsageError, match="sigmas"):
        parse_config(path, {})


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("MKDIFF_THREADS", "3")
    assert parse_config(None, {}).threads == 3
    monkeypatch.delenv("MKDIFF_THREADS")
    assert parse_config(None, {}).threads >= 1


def test_unknown_subcommand_usage_error(capsys):
    assert run("frobnicate") == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_missing_manifest_usage_error(tmp_path):
    assert run("train-seg", "--out", str(tmp_path)) == 1


def test_runtime_failure_exit_2(tmp_path):
    bad = tmp_path / "nope.mkpc"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert run("graph-stats", "--cloud", str(bad), "--out", str(tmp_path)) == 2


# --- synth -------------------------------------------------------------------


def test_synth_split_and_resolved_config(dataset):
    man = load_manifest(dataset / "manifest.json")
    assert len(man.shapes) == 8
    resolved = json.loads((dataset / "config.resolved.json").read_text())
    assert resolved["command"] == "synth"
    assert resolved["points"] == 200
    # replay from the resolved config alone reproduces the dataset
    cloud = load_cloud(dataset / man.shapes[0].cloud_path, "bin-f32")
    assert cloud.n == 200


def test_synth_55_shapes_split_ratio(tmp_path):
    assert run("synth", "--shapes", "55", "--points", "128", "--seed", "7",
               "--out", str(tmp_path / "d")) == 0
    man = load_manifest(tmp_path / "d" / "manifest.json")
    assert [len(man.indices(p)) for p in ("train", "val", "test")] == [40, 5, 10]


def test_synth_replay_from_resolved_config(dataset, tmp_path):
    resolved = dataset / "config.resolved.json"
    out2 = tmp_path / "replay"
    doc = json.loads(resolved.read_text())
    doc["out"] = str(out2)
    cfg2 = tmp_path / "replay.json"
    cfg2.write_text(json.dumps(doc))
    assert run("synth", "--config", str(cfg2)) == 0
    a = (dataset / "subj00_pose00.mkpc").read_bytes()
    b = (out2 / "subj00_pose00.mkpc").read_bytes()
    assert a == b


# --- graph-stats ---------------------------------------------------------------


def test_graph_stats(dataset, tmp_path):
    out = tmp_path / "gs"
    assert run("graph-stats", "--manifest", str(dataset / "manifest.json"),
               "--out", str(out), "--k", "6", "--sigmas", "0.1,0.3") == 0
    stats = json.loads((out / "graph_stats.json").read_text())
    assert stats["n"] == 200
    assert set(stats["sigmas"]) == {"0.1", "0.3"}
    for entry in stats["sigmas"].values():
        assert entry["degree_min"] > 0
        assert abs(entry["lambda_smallest"][0]) < 1e-8


# --- training + eval -----------------------------------------------------------


def test_train_seg_outputs(seg_ckpt):
    out = seg_ckpt.parent
    assert seg_ckpt.exists()
    log = (out / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 2
    rec = json.loads(log[0])
    assert set(rec) == {"epoch", "train_loss", "val_metric", "wall_ms"}
    ckpt = load_checkpoint(seg_ckpt)
    assert ckpt.arch.head == "segmentation"


def test_eval_seg(seg_ckpt, dataset, tmp_path):
    out = tmp_path / "es"
    assert run("eval-seg", "--ckpt", str(seg_ckpt),
               "--manifest", str(dataset / "manifest.json"),
               "--out", str(out)) == 0
    doc = json.loads((out / "dice.json").read_text())
    assert 0 <= doc["dice"]["mean"] <= 1
    assert len(doc["dice"]["per_class"]) == 15


def test_eval_desc(desc_ckpt, dataset, tmp_path):
    out = tmp_path / "ed"
    assert run("eval-desc", "--ckpt", str(desc_ckpt),
               "--manifest", str(dataset / "manifest.json"),
               "--out", str(out), "--k-max", "10", "--max-pairs", "2") == 0
    for name in ("cmc.csv", "roc.csv", "correspondence_quality.csv",
                 "metrics.json", "config.resolved.json"):
        assert (out / name).exists()
    lines = (out / "cmc.csv").read_text().splitlines()
    assert lines[0].startswith("# meta ")
    assert lines[1] == "x,y"
    doc = json.loads((out / "metrics.json").read_text())
    assert 0 <= doc["roc"]["meta"]["auc"] <= 1


def test_extract(desc_ckpt, dataset, tmp_path):
    out = tmp_path / "ex"
    assert run("extract", "--ckpt", str(desc_ckpt),
               "--cloud", str(dataset / "subj00_pose00.mkpc"),
               "--format", "bin-f32", "--out", str(out)) == 0
    desc = np.load(out / "subj00_pose00.desc.npy")
    assert desc.shape == (200, 6)
    assert np.abs(np.linalg.norm(desc, axis=1) - 1).max() < 1e-6
    timing = json.loads((out / "subj00_pose00.timing.json").read_text())
    assert timing["points_per_s"] > 0


def test_perturb_single_cloud(dataset, tmp_path):
    out = tmp_path / "p"
    src = dataset / "subj00_pose00.mkpc"
    assert run("perturb", "--cloud", str(src), "--format", "bin-f32",
               "--disturbance", "missing", "--magnitude", "0.5",
               "--seed", "1", "--out", str(out)) == 0
    cloud = load_cloud(out / "subj00_pose00.mkpc", "bin-f32")
    assert cloud.n == 100
    assert cloud.labels is not None


def test_sweep(seg_ckpt, dataset, tmp_path):
    out = tmp_path / "sw"
    assert run("sweep", "--ckpt", str(seg_ckpt),
               "--manifest", str(dataset / "manifest.json"),
               "--disturbance", "missing", "--grid", "0.0,0.5",
               "--out", str(out)) == 0
    doc = json.loads((out / "sweep.json").read_text())
    assert set(doc["sweep"]) == {"0.0", "0.5"}
    csv = (out / "sweep.csv").read_text().splitlines()
    assert csv[1] == "magnitude,dice_mean,dice_std"
    assert len(csv) == 4


def test_deterministic_flag_byte_identical_runs(dataset, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert run("train-seg", "--manifest", str(dataset / "manifest.json"),
                   "--out", str(out), "--deterministic", *FAST) == 0
        outs.append(out)
    a, b = outs
    assert (a / "checkpoint.mkdc").read_bytes() == (b / "checkpoint.mkdc").read_bytes()
    assert (a / "train_log.jsonl").read_bytes() == (b / "train_log.jsonl").read_bytes()
