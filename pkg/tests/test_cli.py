"""Command-line pipeline: artifacts, exit codes, guards, chaining."""
import csv
import json
import os

import numpy as np
import pytest

from graphncd.cli import main
from graphncd.graph import ClassSplit, load_graph, validate_split
from graphncd.training import load_state

BASE = """
dataset = sbm
sbm_blocks = 15,15,15,15
sbm_p_in = 0.4
sbm_p_out = 0.03
sbm_feat_dim = 6
sbm_feat_shift = 2.5
old_classes = 0,1
new_classes = 2,3
hidden = 16
pretrain_epochs = 12
ncd_epochs = 20
rampup_length = 8
top_k = 3
seed = 0
"""


def _write_cfg(tmp_path, name="run.cfg", extra=""):
    path = tmp_path / name
    path.write_text(BASE + extra, encoding="utf-8")
    return str(path)


def _read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _csv_rows(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))


# ------------------------------------------------------------------- gen-data

def test_gen_data_roundtrip_and_overwrite_guard(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    out = str(tmp_path / "data")
    assert main(["gen-data", "--config", cfg, "--out", out]) == 0
    g = load_graph(os.path.join(out, "edges.txt"),
                   os.path.join(out, "features.txt"),
                   os.path.join(out, "labels.txt"))
    assert g.num_nodes == 60 and g.feat_dim == 6
    split = ClassSplit.load(os.path.join(out, "split.json"))
    validate_split(g, split)
    manifest = _read_json(os.path.join(out, "gen_manifest.json"))
    assert manifest["num_nodes"] == 60
    assert manifest["num_undirected_edges"] == g.num_undirected_edges()
    # a second run must refuse to clobber the dataset
    assert main(["gen-data", "--config", cfg, "--out", out]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["gen-data", "--config", cfg, "--out", out, "--force"]) == 0


def test_gen_data_rejects_file_datasets(tmp_path):
    cfg = _write_cfg(tmp_path, extra="dataset = files\nedges = e\n"
                                     "features = f\nlabels = l\n")
    assert main(["gen-data", "--config", cfg,
                 "--out", str(tmp_path / "d")]) == 2


# ------------------------------------------------------------------- pretrain

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One pretrain+ncd pair shared by the read-only assertions below."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = _write_cfg(root)
    pre = str(root / "pre")
    ncd = str(root / "ncd")
    assert main(["pretrain", "--config", cfg, "--out", pre]) == 0
    assert main(["ncd", "--config", cfg, "--out", ncd,
                 "--pretrain-dir", pre]) == 0
    return cfg, pre, ncd


def test_pretrain_artifacts(pipeline):
    cfg, pre, _ = pipeline
    manifest = _read_json(os.path.join(pre, "manifest.json"))
    assert manifest["command"] == "pretrain" and manifest["phase"] == 1
    for name in manifest["artifacts"]:
        assert os.path.isfile(os.path.join(pre, name)), name
    rows = _csv_rows(os.path.join(pre, "losses.csv"))
    assert rows[0] == ["epoch", "loss", "val_acc"]
    assert len(rows) == 12 + 1
    metrics = _read_json(os.path.join(pre, "metrics.json"))
    assert metrics["phase"] == 1 and "timestamp" in metrics
    assert metrics["old_acc"] == manifest["old_acc"]
    state, meta = load_state(os.path.join(pre, "checkpoint_pretrain.bin"))
    assert meta["phase"] == 1 and state.joint_head is None
    assert meta["phase1_hash"] == manifest["phase1_hash"]


def test_ncd_artifacts_and_flag_echo(pipeline):
    cfg, pre, ncd = pipeline
    manifest = _read_json(os.path.join(ncd, "manifest.json"))
    assert manifest["command"] == "ncd" and manifest["phase"] == 2
    for name in manifest["artifacts"]:
        assert os.path.isfile(os.path.join(ncd, name)), name
    rows = _csv_rows(os.path.join(ncd, "losses.csv"))
    assert rows[0] == list(("epoch", "pseudo", "self", "perturb", "replay",
                            "distill", "beta1", "beta2", "total"))
    assert len(rows) == manifest["epochs_run"] + 1
    metrics = _read_json(os.path.join(ncd, "metrics.json"))
    assert metrics["phase"] == 2
    for flag in ("use_pseudo", "use_self", "use_perturb", "use_replay",
                 "use_distill"):
        assert metrics[flag] is True
    state, meta = load_state(os.path.join(ncd, "checkpoint_ncd_best.bin"))
    assert meta["phase"] == 2 and state.joint_head is not None
    assert meta["phase1_old_acc"] == pytest.approx(
        _read_json(os.path.join(pre, "metrics.json"))["old_acc"])


def test_ncd_without_pretrain_artifacts(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    assert main(["ncd", "--config", cfg, "--out", str(tmp_path / "n"),
                 "--pretrain-dir", str(tmp_path / "empty")]) == 3
    assert "run pretrain first" in capsys.readouterr().err


def test_ncd_rejects_stale_pretrain(pipeline, tmp_path, capsys):
    cfg, pre, _ = pipeline
    # a different seed regenerates a different dataset: the stored phase-1
    # artifacts no longer describe it
    assert main(["ncd", "--config", cfg, "--out", str(tmp_path / "n"),
                 "--pretrain-dir", pre, "--seed", "1"]) == 3
    assert "rerun pretrain" in capsys.readouterr().err


def test_phase2_knobs_do_not_invalidate_pretrain(pipeline, tmp_path):
    cfg, pre, _ = pipeline
    alt = _write_cfg(tmp_path, name="alt.cfg",
                     extra="eta = 0.5\nncd_epochs = 6\nuse_perturb = off\n")
    assert main(["ncd", "--config", alt, "--out", str(tmp_path / "n2"),
                 "--pretrain-dir", pre]) == 0


def test_overwrite_guard_on_training_outputs(pipeline, capsys):
    cfg, pre, _ = pipeline
    assert main(["pretrain", "--config", cfg, "--out", pre]) == 2
    assert "pass --force" in capsys.readouterr().err


# ----------------------------------------------------------------------- eval

def test_eval_artifacts_match_training_metrics(pipeline, tmp_path):
    cfg, pre, ncd = pipeline
    out = str(tmp_path / "ev")
    ckpt = os.path.join(ncd, "checkpoint_ncd_best.bin")
    assert main(["eval", "--config", cfg, "--out", out,
                 "--checkpoint", ckpt]) == 0
    manifest = _read_json(os.path.join(out, "manifest.json"))
    for name in manifest["artifacts"]:
        assert os.path.isfile(os.path.join(out, name)), name
    assert "perf_matrix.csv" in manifest["artifacts"]
    rows = _csv_rows(os.path.join(out, "nodes.csv"))
    assert len(rows) == 60 + 1
    assert rows[0][:2] == ["id", "label"] and rows[0][2] == "z0"
    # re-evaluating the checkpoint reproduces the training-time numbers
    ncd_metrics = _read_json(os.path.join(ncd, "metrics.json"))
    ev_metrics = _read_json(os.path.join(out, "metrics.json"))
    for key in ("old_acc", "new_acc", "all_acc", "aa", "af"):
        assert ev_metrics[key] == ncd_metrics[key]


def test_eval_phase1_checkpoint(pipeline, tmp_path):
    cfg, pre, _ = pipeline
    out = str(tmp_path / "ev1")
    assert main(["eval", "--config", cfg, "--out", out, "--checkpoint",
                 os.path.join(pre, "checkpoint_pretrain.bin")]) == 0
    metrics = _read_json(os.path.join(out, "metrics.json"))
    assert metrics["phase"] == 1


def test_eval_dimension_mismatch(pipeline, tmp_path, capsys):
    cfg, pre, ncd = pipeline
    bad = _write_cfg(tmp_path, name="bad.cfg", extra="sbm_feat_dim = 8\n")
    assert main(["eval", "--config", bad, "--out", str(tmp_path / "ev"),
                 "--checkpoint",
                 os.path.join(ncd, "checkpoint_ncd_best.bin")]) == 4
    assert "input features" in capsys.readouterr().err


def test_eval_missing_checkpoint(pipeline, tmp_path):
    cfg, _, _ = pipeline
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "ev"),
                 "--checkpoint", str(tmp_path / "nope.bin")]) == 2


# ------------------------------------------------------------------ bad input

def test_missing_config_file(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "nope.cfg"),
                 "--out", str(tmp_path / "o")]) == 2


def test_malformed_config(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("hidden = sixteen\n", encoding="utf-8")
    assert main(["pretrain", "--config", str(path),
                 "--out", str(tmp_path / "o")]) == 2
    assert "hidden" in capsys.readouterr().err


def test_files_dataset_with_missing_paths(tmp_path):
    cfg = _write_cfg(tmp_path, extra="dataset = files\nedges = missing.txt\n"
                                     "features = f.txt\nlabels = l.txt\n")
    assert main(["pretrain", "--config", cfg,
                 "--out", str(tmp_path / "o")]) == 2


def test_seed_override_changes_dataset(tmp_path):
    cfg = _write_cfg(tmp_path)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["gen-data", "--config", cfg, "--out", a, "--seed", "0"]) == 0
    assert main(["gen-data", "--config", cfg, "--out", b, "--seed", "1"]) == 0
    ha = _read_json(os.path.join(a, "gen_manifest.json"))["dataset_sha256"]
    hb = _read_json(os.path.join(b, "gen_manifest.json"))["dataset_sha256"]
    assert ha != hb


# ------------------------------------------------------------------- chaining

def test_run_chains_all_three_stages(tmp_path):
    cfg = _write_cfg(tmp_path)
    out = str(tmp_path / "full")
    assert main(["run", "--config", cfg, "--out", out]) == 0
    for stage in ("pretrain", "ncd", "eval"):
        assert os.path.isfile(os.path.join(out, stage, "manifest.json")), stage
    ncd_manifest = _read_json(os.path.join(out, "ncd", "manifest.json"))
    assert ncd_manifest["pretrain_dir"] == os.path.join(out, "pretrain")
    ev = _read_json(os.path.join(out, "eval", "metrics.json"))
    assert ev["phase"] == 2


def test_sweep_depth_writes_one_row_per_depth(tmp_path):
    cfg = _write_cfg(tmp_path, extra="sweep_layers = 2,3\n"
                                     "pretrain_epochs = 8\nncd_epochs = 8\n")
    out = str(tmp_path / "sweep")
    assert main(["sweep-depth", "--config", cfg, "--out", out]) == 0
    rows = _csv_rows(os.path.join(out, "sweep.csv"))
    assert rows[0] == ["layers", "old_acc", "new_acc", "all_acc", "aa", "af"]
    assert [r[0] for r in rows[1:]] == ["2", "3"]
    assert all(np.isfinite(float(v)) for r in rows[1:] for v in r[1:])
