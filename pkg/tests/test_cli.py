import csv
import json
import shutil

import pytest

from ucan.cli import main, pred_filename
from ucan.core import TracerId
from ucan.data import load_volume
from ucan.train import read_log

DESK = {
    "patch_shape": [32, 32, 32],
    "base_width": 4,
    "depth": 2,
    "d_base_width": 4,
    "se_reduction": 4,
    "res_blocks": 1,
    "steps_per_epoch": 1,
    "checkpoint_every": 5,
}


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["phantom", "--n", "5", "--shape", "32", "32", "32", "--seed", "0", "--out", str(root / "data")]) == 0
    (root / "desk.json").write_text(json.dumps(DESK))
    rc = main(
        ["train", "--config", str(root / "desk.json"), "--data", str(root / "data"), "--run-dir", str(root / "run"),
         "--epochs", "20"]
    )
    assert rc == 0
    return root


def test_phantom_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["phantom", "--n", "2", "--shape", "16", "16", "16", "--seed", "3", "--out", str(tmp_path / name)]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a == b
    assert any(str(p).endswith("pet_A.nii") for p in a)


def test_phantom_zero_studies(tmp_path):
    assert main(["phantom", "--n", "0", "--out", str(tmp_path / "o")]) == 0
    assert [p.name for p in (tmp_path / "o").iterdir()] == ["manifest.json"]


def test_phantom_negative_count(tmp_path, capsys):
    assert main(["phantom", "--n", "-1", "--out", str(tmp_path / "o")]) == 1
    assert "--n" in capsys.readouterr().err


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["phantom", "--n", "1", "--shape", "16", "16", "16", "--out", str(blocker / "sub")]) == 3


def test_refuses_to_overwrite(tmp_path, capsys):
    out = tmp_path / "o"
    args = ["phantom", "--n", "1", "--shape", "16", "16", "16", "--out", str(out)]
    assert main(args) == 0
    assert main(args) == 3
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--force"]) == 0


def test_manifest_contents(tmp_path):
    main(["phantom", "--n", "1", "--shape", "16", "16", "16", "--seed", "4", "--out", str(tmp_path / "o")])
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["command"] == "phantom" and m["seed"] == 4 and "code_version" in m


def test_train_missing_data_names_field(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nowhere"), "--run-dir", str(tmp_path / "run")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "data_dir" in err
    rc = main(["train", "--run-dir", str(tmp_path / "run")])
    assert rc == 1 and "data_dir" in capsys.readouterr().err


def test_train_config_errors_name_every_field(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"lr_g": -1, "depth": 0, "colour": "red"}))
    rc = main(["train", "--config", str(tmp_path / "c.json"), "--data", str(tmp_path), "--run-dir", str(tmp_path / "r")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "lr_g" in err and "depth" in err and "colour" in err


def test_train_desk_run(workspace):
    run = workspace / "run"
    assert (run / "checkpoints" / "last.pt").is_file()
    assert (run / "config.json").is_file()
    rows = read_log(run / "train_log.csv")
    assert [r["step"] for r in rows] == list(range(1, 21))
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["final_step"] == 20 and len(manifest["params"]["val_ids"]) == 1


def test_train_resume_continues_steps(workspace, tmp_path):
    run = tmp_path / "run"
    shutil.copytree(workspace / "run", run)
    args = ["train", "--config", str(workspace / "desk.json"), "--data", str(workspace / "data"), "--run-dir", str(run)]
    assert main(args + ["--epochs", "22", "--resume"]) == 0
    rows = read_log(run / "train_log.csv")
    assert [r["step"] for r in rows] == list(range(1, 23))


def test_train_refuses_existing_run(workspace, capsys):
    args = ["train", "--config", str(workspace / "desk.json"), "--data", str(workspace / "data"),
            "--run-dir", str(workspace / "run"), "--epochs", "1"]
    assert main(args) == 3


def test_resume_without_checkpoint(workspace, tmp_path):
    args = ["train", "--config", str(workspace / "desk.json"), "--data", str(workspace / "data"),
            "--run-dir", str(tmp_path / "fresh"), "--resume"]
    assert main(args) == 3


def _infer(workspace, out, *extra, study="phantom_000"):
    return main(
        ["infer", "--checkpoint", str(workspace / "run" / "checkpoints" / "last.pt"),
         "--study", str(workspace / "data" / study), "--out", str(out), *extra]
    )


def test_infer_two_targets(workspace, tmp_path):
    assert _infer(workspace, tmp_path / "p", "--source", "A", "--targets", "B", "C") == 0
    for t in ("B", "C"):
        v = load_volume(tmp_path / "p" / f"pred_A_to_{t}.nii")
        assert v.shape == (32, 32, 32)
        assert v.data.min() >= -1e-3
    m = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert set(m["outputs"]) == {"A->B", "A->C"} and m["config_hash"]


def test_infer_rejects_identity(workspace, tmp_path, capsys):
    assert _infer(workspace, tmp_path / "p", "--source", "A", "--targets", "A") == 1
    assert "source" in capsys.readouterr().err


def test_infer_partial_study(workspace, tmp_path):
    partial = tmp_path / "partial"
    partial.mkdir()
    for f in ("pet_B.nii", "mr.nii"):
        shutil.copy(workspace / "data" / "phantom_001" / f, partial / f)
    rc = main(["infer", "--checkpoint", str(workspace / "run" / "checkpoints" / "last.pt"), "--study", str(partial),
               "--source", "B", "--out", str(tmp_path / "p")])
    assert rc == 0
    out = json.loads((tmp_path / "p" / "manifest.json").read_text())["outputs"]
    assert out["B->A"]["denormalized"] is False
    assert load_volume(tmp_path / "p" / "pred_B_to_C.nii").data.max() <= 1.0


def test_infer_missing_source(workspace, tmp_path):
    partial = tmp_path / "partial"
    partial.mkdir()
    shutil.copy(workspace / "data" / "phantom_001" / "mr.nii", partial / "mr.nii")
    rc = main(["infer", "--checkpoint", str(workspace / "run" / "checkpoints" / "last.pt"), "--study", str(partial),
               "--source", "A", "--out", str(tmp_path / "p")])
    assert rc == 1


def test_eval_marks_missing_predictions(workspace, tmp_path):
    preds = tmp_path / "preds"
    assert _infer(workspace, preds / "phantom_000", "--source", "A", "--targets", "B") == 0
    rc = main(["eval", "--predictions", str(preds), "--studies", str(workspace / "data"), "--out", str(tmp_path / "ev"),
               "--baseline"])
    assert rc == 0
    with open(tmp_path / "ev" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    ucan = [r for r in rows if r["method"] == "UCAN"]
    assert len(ucan) == 5 * 6
    scored = [r for r in ucan if r["nmse_percent"] != "n/a"]
    assert [(r["study_id"], r["task"]) for r in scored] == [("phantom_000", "A->B")]
    assert all(r["nmse_percent"] != "n/a" for r in rows if r["method"] == "copy-input")
    assert (tmp_path / "ev" / "roi_bias.png").is_file()

    # the report command rebuilds identical tables and a byte-identical plot
    assert main(["report", "--metrics", str(tmp_path / "ev"), "--out", str(tmp_path / "r1")]) == 0
    assert main(["report", "--metrics", str(tmp_path / "ev"), "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r1" / "table.csv").read_text() == (tmp_path / "ev" / "table.csv").read_text()
    assert (tmp_path / "r1" / "roi_bias.png").read_bytes() == (tmp_path / "r2" / "roi_bias.png").read_bytes()


def test_report_without_metrics(tmp_path):
    assert main(["report", "--metrics", str(tmp_path), "--out", str(tmp_path / "r")]) == 3


def test_pred_filename():
    assert pred_filename(TracerId.C, TracerId.A) == "pred_C_to_A.nii"
