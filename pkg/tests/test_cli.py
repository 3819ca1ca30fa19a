import json
import subprocess
import sys

import pytest

from actnet.cli import main
from actnet.features import read_descriptors


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main([
        "synth", "--classes", "4", "--per-class", "8", "--seed", "5", "--out", str(data),
        "--width", "6", "--height", "6", "--depths", "8,6", "--signal-channels", "3",
    ])
    assert rc == 0
    return root, data / "manifest.jsonl"


def train_config(root, **overrides):
    cfg = {"triplets_per_epoch": 30, "max_epochs": 2, "seed": 3, **overrides}
    path = root / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_pipeline_synth_train_evaluate(dataset):
    root, manifest = dataset
    cfg = train_config(root)
    model = root / "model.json"
    rc = main([
        "train", "--manifest", str(manifest), "--config", str(cfg),
        "--out", str(model), "--out-dim", "8", "--threads", "1",
    ])
    assert rc == 0
    assert model.exists() and (root / "model.json.log.jsonl").exists()

    report = root / "report.json"
    rc = main([
        "evaluate", "--model", str(model), "--manifest", str(manifest),
        "--out", str(report), "--threads", "1",
    ])
    assert rc == 0
    doc = json.loads(report.read_text())
    assert 0.0 <= doc["map"] <= 1.0
    assert doc["options"]["compact_k"] is None
    assert len(doc["per_query_ap"]) == 4


def test_evaluate_compact_and_qe_from_same_model(dataset):
    root, manifest = dataset
    model = root / "model.json"
    out1 = root / "r_compact.json"
    rc = main([
        "evaluate", "--model", str(model), "--manifest", str(manifest),
        "--out", str(out1), "--compact", "4", "--threads", "1",
    ])
    assert rc == 0
    assert json.loads(out1.read_text())["options"]["compact_k"] == 4

    out2 = root / "r_qe.json"
    rc = main([
        "evaluate", "--model", str(model), "--manifest", str(manifest),
        "--out", str(out2), "--qe-n", "3", "--qe-alpha", "2.0", "--threads", "1",
    ])
    assert rc == 0
    assert json.loads(out2.read_text())["options"]["qe"] == {"n": 3, "alpha": 2.0}


def test_extract_and_separability(dataset):
    root, manifest = dataset
    model = root / "model.json"
    store = root / "db.actd"
    rc = main([
        "extract", "--model", str(model), "--manifest", str(manifest),
        "--split", "db", "--out", str(store), "--threads", "1",
    ])
    assert rc == 0
    ids, mat = read_descriptors(store)
    assert len(ids) == mat.shape[0] > 0

    sep = root / "sep.json"
    rc = main([
        "analyze-separability", "--descriptors", str(store),
        "--manifest", str(manifest), "--out", str(sep), "--bins", "50", "--threads", "1",
    ])
    assert rc == 0
    doc = json.loads(sep.read_text())
    assert doc["bins"] == 50 and doc["kld"] >= 0
    assert sum(doc["matching_histogram"]) == doc["matching_pairs"]


def test_baseline_command(dataset):
    root, manifest = dataset
    out = root / "baselines.json"
    rc = main(["baseline", "--manifest", str(manifest), "--out", str(out),
               "--out-dim", "8", "--threads", "1"])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert set(doc["heads"]) == {"da", "max", "gem"}
    for head in doc["heads"].values():
        assert 0 <= head["map"] <= 1 and head["kld"] >= 0


def test_verify_gradients_cli(tmp_path):
    out = tmp_path / "grad.json"
    rc = main(["verify-gradients", "--seed", "7", "--out", str(out), "--threads", "1"])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["pass"] is True


def test_appendix_check_cli(tmp_path):
    out = tmp_path / "appendix.json"
    rc = main([
        "appendix-check", "--lambda", "2", "--p", "1", "--samples", "100000",
        "--seed", "42", "--out", str(out), "--threads", "1",
    ])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["ks_distance"] <= 0.01
    assert doc["lambda_exp"] == 2.0


def test_exit_codes(dataset, tmp_path):
    root, manifest = dataset
    # usage errors
    assert main(["no-such-command"]) == 64
    assert main(["evaluate", "--bogus-flag"]) == 64
    # validation error: manifest without db/query entries
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "class_label": 0, "path": "a.actf", "split": "train"}\n')
    rc = main([
        "evaluate", "--model", str(root / "model.json"), "--manifest", str(bad),
        "--out", str(tmp_path / "r.json"), "--threads", "1",
    ])
    assert rc == 1
    # I/O error: missing model file
    rc = main([
        "evaluate", "--model", str(tmp_path / "missing.json"), "--manifest", str(manifest),
        "--out", str(tmp_path / "r.json"), "--threads", "1",
    ])
    assert rc == 2


def test_console_entry_point_usage_exit():
    proc = subprocess.run(
        [sys.executable, "-m", "actnet.cli", "--definitely-not-a-flag"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 64
