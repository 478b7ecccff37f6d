import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from mfpnet.cli import confusion_svg, main
from mfpnet.dataeval.manifest import load_manifest
from mfpnet.dataeval.metrics import ConfusionMatrix

TINY = {"model": {"dense_width": 16}, "epochs": 1, "labeling": None,
        "gan": {"steps": 2, "base_channels": 2, "batch_size": 4}}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--subjects", "4", "--classes", "8", "--per", "1", "--seed", "1",
                 "--out", str(root / "data")]) == 0
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    return root / "data" / "manifest.json", cfg


def test_shape_plan_text_and_csv(capsys, tmp_path):
    code, out, _ = run(["shape-plan", "--patch-size", 276, "--classes", 8, "--out", tmp_path], capsys)
    assert code == 0
    assert "115320" in out and "807240" in out
    csv = (tmp_path / "shape_plan.csv").read_text().splitlines()
    assert csv[0] == "layer,shape,size"
    assert "concat,807240,807240" in csv and "C3 pool,120x31x31,115320" in csv
    code, out, _ = run(["shape-plan", "--format", "csv"], capsys)
    assert out.splitlines()[0] == "layer,shape,size"


def test_invalid_patch_size_is_single_line_error(capsys):
    code, out, err = run(["shape-plan", "--patch-size", 20], capsys)
    assert code == 1 and out == ""
    assert err.count("\n") == 1 and err.startswith("error: ") and "C3 conv" in err


def test_usage_errors_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--augment", "sideways"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_missing_inputs_fail_before_side_effects(capsys, tmp_path):
    out_dir = tmp_path / "never"
    code, _, err = run(["train", "--manifest", tmp_path / "absent.json", "--out", out_dir], capsys)
    assert code == 1 and err.startswith("error: ")
    assert not out_dir.exists()
    code, _, err = run(["train", "--out", out_dir], capsys)
    assert code == 1 and "--manifest" in err


def test_bad_config_rejected(capsys, tmp_path, small):
    manifest, _ = small
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(["extract-patches", "--manifest", manifest, "--config", bad, "--out", tmp_path / "o"], capsys)
    assert code == 1 and "not valid JSON" in err
    bad.write_text(json.dumps({"model": {"depth": 3}}))
    code, _, err = run(["extract-patches", "--manifest", manifest, "--config", bad, "--out", tmp_path / "o"], capsys)
    assert code == 1 and "invalid config" in err


def test_synth_data_writes_requested_count(capsys, tmp_path):
    code, out, _ = run(["synth-data", "--subjects", 16, "--classes", 8, "--per", 4, "--seed", 0,
                        "--out", tmp_path], capsys)
    assert code == 0
    assert len(load_manifest(tmp_path / "manifest.json").samples) == 512


def test_flag_overrides_config(capsys, tmp_path, small):
    manifest, _ = small
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "seed": 5, "folds": 3, "model": {"patch_size": 40, "dense_width": 16}}))
    code, _, _ = run(["extract-patches", "--manifest", manifest, "--config", cfg, "--seed", 7,
                      "--out", tmp_path / "o"], capsys)
    assert code == 0
    resolved = json.loads((tmp_path / "o" / "resolved_config.json").read_text())["experiment"]
    assert resolved["seed"] == 7 and resolved["folds"] == 3 and resolved["model"]["patch_size"] == 40
    assert resolved["model"]["dense_width"] == 16 and resolved["batch_size"] == 32


def test_extract_patches_idempotent(capsys, tmp_path, small):
    manifest, cfg = small
    outputs = []
    for name in ("a", "b"):
        assert run(["extract-patches", "--manifest", manifest, "--config", cfg, "--out", tmp_path / name],
                   capsys)[0] == 0
        d = np.load(tmp_path / name / "patches.npz")
        outputs.append(d["patches"])
    assert outputs[0].shape == (32, 7, 36, 36)
    assert np.array_equal(outputs[0], outputs[1])


def test_augment_counts(capsys, tmp_path, small):
    manifest, cfg = small
    code, _, _ = run(["augment", "--manifest", manifest, "--config", cfg, "--plan", "rotate90,shift",
                      "--out", tmp_path], capsys)
    assert code == 0
    d = np.load(tmp_path / "augmented.npz")
    assert d["patches"].shape[0] == 96 and np.array_equal(d["labels"][:32], d["labels"][32:64])
    code, _, err = run(["augment", "--manifest", manifest, "--plan", "blur", "--out", tmp_path], capsys)
    assert code == 1 and "blur" in err


def test_train_cross_eval_fine_tune_plot(capsys, tmp_path, small):
    manifest, cfg = small
    assert run(["train", "--manifest", manifest, "--config", cfg, "--out", tmp_path / "m"], capsys)[0] == 0
    ckpt = tmp_path / "m" / "model.ckpt"
    code, out, _ = run(["cross-eval", "--manifest", manifest, "--model", ckpt, "--out", tmp_path / "x"], capsys)
    assert code == 0 and "accuracy" in out
    cm = ConfusionMatrix.from_csv(tmp_path / "x" / "confusion.csv")
    assert cm.total == 32
    code, _, _ = run(["fine-tune", "--manifest", manifest, "--model", ckpt, "--epochs", 1, "--fraction", 0.5,
                      "--out", tmp_path / "f"], capsys)
    info = json.loads((tmp_path / "f" / "fine_tune.json").read_text())
    assert code == 0 and not set(info["tune_subjects"]) & set(info["test_subjects"])
    code, _, err = run(["fine-tune", "--manifest", manifest, "--model", ckpt, "--fraction", 1.5,
                        "--out", tmp_path / "g"], capsys)
    assert code == 1 and "--fraction" in err
    code, _, _ = run(["plot", "--confusion", tmp_path / "x" / "confusion.csv", "--out", tmp_path / "p"], capsys)
    assert code == 0 and (tmp_path / "p" / "confusion.svg").exists()


def test_eval_runs_experiment_rows(capsys, tmp_path, small):
    manifest, cfg = small
    code, out, _ = run(["eval", "--manifest", manifest, "--config", cfg, "--folds", 2, "--experiment", 3,
                        "--out", tmp_path], capsys)
    assert code == 0 and out.strip().startswith("tf:")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert list(summary) == ["experiment3"] and summary["experiment3"]["augment"] == "tf"
    assert len(summary["experiment3"]["fold_accuracies"]) == 2
    assert (tmp_path / "provenance.json").exists() and (tmp_path / "confusion_aggregate.csv").exists()


def test_gan_train_and_generate(capsys, tmp_path, small):
    manifest, cfg = small
    assert run(["gan-train", "--manifest", manifest, "--config", cfg, "--out", tmp_path / "g"], capsys)[0] == 0
    assert len((tmp_path / "g" / "gan_history.csv").read_text().splitlines()) == 3
    code, _, _ = run(["gan-generate", "--manifest", manifest, "--config", cfg, "--gan", tmp_path / "g",
                      "--out", tmp_path / "s"], capsys)
    assert code == 0
    generated = load_manifest(tmp_path / "s" / "cgan_manifest.json")
    assert len(generated.samples) == 4 * 7
    assert {s.provenance for s in generated.samples} == {"cgan"}
    assert {s.label for s in generated.samples} == set(generated.classes) - {"neutral"}


def test_confusion_svg_shows_row_percentages():
    cm = ConfusionMatrix(("a", "b", "c"), np.array([[3, 1, 0], [0, 0, 0], [2, 2, 4]]))
    root = ET.fromstring(confusion_svg(cm))
    cells = {(int(t.get("data-row")), int(t.get("data-col"))): float(t.text)
             for t in root.iter("{http://www.w3.org/2000/svg}text") if t.get("class") == "cell"}
    assert len(cells) == 9
    expected = cm.row_percentages()
    for (i, j), value in cells.items():
        assert abs(value - expected[i, j]) <= 0.05
    assert cells[(0, 0)] == 75.0 and cells[(1, 1)] == 0.0 and cells[(2, 2)] == 50.0


def test_rerun_overwrites_with_identical_bytes(capsys, tmp_path, small):
    manifest, cfg = small
    argv = ["train", "--manifest", manifest, "--config", cfg, "--seed", 3, "--out", tmp_path]
    snapshots = []
    for _ in range(2):
        assert run(argv, capsys)[0] == 0
        snapshots.append({p.name: p.read_bytes() for p in sorted(tmp_path.iterdir())})
    assert set(snapshots[0]) >= {"model.ckpt", "model.ckpt.config.json", "train_log.json", "resolved_config.json"}
    assert snapshots[0] == snapshots[1]
