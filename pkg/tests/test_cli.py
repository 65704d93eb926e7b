import json

import numpy as np
import pytest

from rvk.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from rvk.evalharness import read_delimited
from rvk.formats import write_pgm

SMALL = {
    "scene": {"intrinsics": {"fx": 250.0, "fy": 250.0, "cx": 160.0, "cy": 120.0,
                             "width": 320, "height": 240},
              "distance_range": [8.0, 40.0]},
    "model": {"patch_h": 32, "patch_w": 48, "encoder_channels": [3, 4], "feature_dim": 5,
              "roi": 3, "levels": 2, "fc_widths": [8, 6]},
    "flow": {"levels": 2},
    "sampling": {"target_w": 48, "target_h": 32},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data"), "--count", "3",
                 "--seed", "5"]) == EXIT_OK
    return root, cfg


def _train(root, cfg, name, *extra):
    return main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out-model",
                 str(root / name), "--epochs", "3", "--no-figures", *extra])


def test_gen_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d2"), "--count", "3",
                 "--seed", "5"]) == EXIT_OK
    a = sorted(p.relative_to(root / "data") for p in (root / "data").rglob("*") if p.is_file())
    b = sorted(p.relative_to(tmp_path / "d2") for p in (tmp_path / "d2").rglob("*") if p.is_file())
    assert a == b and a
    for rel in a:
        assert (root / "data" / rel).read_bytes() == (tmp_path / "d2" / rel).read_bytes()


def test_gen_refuses_non_empty_without_force(workspace, tmp_path, capsys):
    root, cfg = workspace
    out = tmp_path / "full"
    out.mkdir()
    (out / "junk").write_text("x")
    assert main(["gen", "--config", str(cfg), "--out", str(out), "--count", "1"]) == EXIT_CONFIG
    assert "--force" in capsys.readouterr().err
    assert main(["gen", "--config", str(cfg), "--out", str(out), "--count", "1",
                 "--force"]) == EXIT_OK
    assert not (out / "junk").exists()


def test_gen_count_zero(workspace, tmp_path):
    root, cfg = workspace
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "e"), "--count", "0"]) == 0
    manifest = json.loads((tmp_path / "e" / "manifest.json").read_text())
    assert manifest["scenes"] == []


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schedule": {"epoch": 3}}))
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "epoch" in capsys.readouterr().err
    assert main(["gen", "--out", str(tmp_path / "x"), "--set", "flow.source=magic"]) == EXIT_CONFIG
    assert main(["gen", "--out", str(tmp_path / "x"), "--set", "nodot"]) == EXIT_CONFIG


def test_threads_env_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("RVK_THREADS", "many")
    assert main(["gen", "--out", str(tmp_path / "x"), "--count", "0"]) == EXIT_CONFIG


def test_train_is_deterministic_and_logs_schedule(workspace):
    root, cfg = workspace
    assert _train(root, cfg, "a.ckpt") == EXIT_OK
    assert _train(root, cfg, "b.ckpt") == EXIT_OK
    assert (root / "a.ckpt").read_bytes() == (root / "b.ckpt").read_bytes()
    rows = read_delimited(root / "a.loss.csv")
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert _train(root, cfg, "a.ckpt") == EXIT_CONFIG           # exists, no --force
    assert _train(root, cfg, "a.ckpt", "--force") == EXIT_OK


def test_train_lr_decay_rows(workspace):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out-model",
                 str(root / "long.ckpt"), "--epochs", "91", "--no-figures"]) == EXIT_OK
    rows = {int(r["epoch"]): float(r["lr"]) for r in read_delimited(root / "long.loss.csv")}
    for epoch, lr in ((1, 1e-4), (31, 2e-5), (61, 4e-6), (91, 8e-7)):
        assert rows[epoch] == pytest.approx(lr, rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nonfinite_leaves_no_checkpoint(workspace, capsys):
    root, cfg = workspace
    assert _train(root, cfg, "nan.ckpt", "--lr", "1e300") == EXIT_NUMERIC
    assert "non-finite" in capsys.readouterr().err
    assert not (root / "nan.ckpt").exists()
    assert not list(root.glob("nan.ckpt*"))


def test_train_missing_data(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "none"),
                 "--out-model", str(tmp_path / "m.ckpt")]) == EXIT_DATA


def test_eval_writes_report_and_figures(workspace):
    root, cfg = workspace
    if not (root / "a.ckpt").exists():
        assert _train(root, cfg, "a.ckpt") == EXIT_OK
    rep = root / "rep"
    assert main(["eval", "--data", str(root / "data"), "--model", str(root / "a.ckpt"),
                 "--report", str(rep)]) == EXIT_OK
    doc = json.loads((root / "rep.json").read_text())
    assert doc["schema_version"] == 1 and doc["failures"] == []
    assert np.isfinite(doc["depth"]["abs_rel"])
    assert (root / "rep.csv").exists()
    assert (root / "rep_velocity.png").stat().st_size > 0
    assert (root / "rep_distance.png").stat().st_size > 0


def test_eval_rejects_corrupt_checkpoint(workspace, tmp_path):
    root, cfg = workspace
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval", "--data", str(root / "data"), "--model", str(bad),
                 "--report", str(tmp_path / "r")]) == EXIT_DATA


def test_infer_outputs_one_record_per_box(workspace, tmp_path, capsys):
    root, cfg = workspace
    if not (root / "a.ckpt").exists():
        assert _train(root, cfg, "a.ckpt") == EXIT_OK
    scene = root / "data" / "scene_00000"
    boxes = tmp_path / "boxes.json"
    boxes.write_text(json.dumps([[100, 80, 160, 130], [50, 50, 50, 90]]))
    assert main(["infer", "--model", str(root / "a.ckpt"), "--prev", str(scene / "prev.pgm"),
                 "--curr", str(scene / "curr.pgm"), "--boxes", str(boxes), "--dt", "0.05"]) == 0
    doc = json.loads(capsys.readouterr().out)
    recs = doc["vehicles"]
    assert len(recs) == 2
    assert np.isfinite(recs[0]["distance_m"]) and len(recs[0]["velocity_mps"]) == 3
    assert "error" in recs[1]


def test_infer_reports_all_input_problems(tmp_path, capsys):
    write_pgm(tmp_path / "ok.pgm", np.zeros((8, 8), np.uint8))
    (tmp_path / "boxes.json").write_text("{")
    code = main(["infer", "--model", str(tmp_path / "none.ckpt"), "--prev", str(tmp_path / "ok.pgm"),
                 "--curr", str(tmp_path / "missing.pgm"), "--boxes", str(tmp_path / "boxes.json"),
                 "--dt", "0.05"])
    err = capsys.readouterr().err
    assert code == EXIT_DATA
    assert "missing.pgm" in err and "boxes.json" in err and "none.ckpt" in err


def test_ablate_static_scenes_tie(tmp_path, capsys):
    doc = json.loads(json.dumps(SMALL))
    doc["scene"]["velocity_range"] = [[0, 0], [0, 0], [0, 0]]
    cfg = tmp_path / "static.json"
    cfg.write_text(json.dumps({"scene": doc["scene"]}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d"), "--count", "2"]) == 0
    capsys.readouterr()
    assert main(["ablate", "--config", str(cfg), "--data", str(tmp_path / "d"),
                 "--report", str(tmp_path / "abl")]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["win_rate_centric"] == "tie" and summary["ties"] == summary["vehicles"] > 0
    assert (tmp_path / "abl.csv").exists() and (tmp_path / "abl_gain.png").exists()
