import csv
import json

import numpy as np
import pytest
from PIL import Image

from casa.calibration import dkw_epsilon
from casa.cli import run
from casa.io import read_png, stain_from_json


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run(["generate", "--out", str(root / "d"), "--train-per-class", "3",
                "--heldout-per-class", "2", "--seed", "3"]) == 0
    return root / "d"


@pytest.fixture(scope="module")
def budget_file(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("budget") / "b.json"
    assert run(["calibrate", "--images", str(data_dir / "0"), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def model_file(data_dir, budget_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.json"
    log = out.parent / "log.csv"
    assert run(["train-demo", "--method", "casa", "--data", str(data_dir), "--budget", str(budget_file),
                "--epochs", "1", "--out-checkpoint", str(out), "--log", str(log)]) == 0
    with open(log, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "clean_loss", "adv_loss", "train_acc"]
    assert float(rows[0]["adv_loss"]) >= float(rows[0]["clean_loss"])
    return out


def test_no_arguments_is_usage_error(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    assert run(["calibrate", "--bogus"]) == 1
    assert run(["calibrate", "--images", "x", "--delta", "1.5"]) == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip().startswith("casa 0.")


def test_generate_layout(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert {c["center_id"] for c in manifest["centers"]} == {0, 2, 3, 4}
    assert manifest["config"]["train_patches_per_class"] == 3
    assert len(list((data_dir / "0" / "1").glob("*.png"))) == 3
    assert len(list((data_dir / "2" / "0").glob("*.png"))) == 2
    for c in manifest["centers"]:
        assert np.asarray(c["w_true"]).shape == (3, 2)


def test_calibrate_budget_document(budget_file):
    doc = json.loads(budget_file.read_text())
    assert set(doc) == {"tau_w_rad", "tau_h", "n", "delta", "beta", "epsilon_n", "quantile_level"}
    assert doc["n"] == 6
    assert doc["epsilon_n"] == pytest.approx(dkw_epsilon(6, 0.05), abs=1e-15)


def test_calibrate_stats_round_trip(data_dir, tmp_path, budget_file):
    stats = tmp_path / "stats.csv"
    assert run(["calibrate", "--images", str(data_dir / "0"), "--stats-out", str(stats),
                "--out", str(tmp_path / "a.json")]) == 0
    with open(stats, newline="") as fh:
        assert next(csv.reader(fh)) == ["image_id", "alpha_rad", "r_h", "r_e"]
    assert run(["calibrate", "--stats", str(stats), "--out", str(tmp_path / "b.json")]) == 0
    assert json.loads((tmp_path / "a.json").read_text()) == json.loads((tmp_path / "b.json").read_text())


def test_calibrate_several_directories(data_dir, tmp_path):
    stats = tmp_path / "stats.csv"
    assert run(["calibrate", "--images", str(data_dir / "0"), str(data_dir / "3"),
                "--stats-out", str(stats), "--out", str(tmp_path / "b.json")]) == 0
    assert json.loads((tmp_path / "b.json").read_text())["n"] == 12
    with open(stats, newline="") as fh:
        ids = [row["image_id"] for row in csv.DictReader(fh)]
    assert len(set(ids)) == 12


def test_decompose_writes_stain_json(data_dir, capsys):
    assert run(["decompose", "--image", str(data_dir / "0" / "1" / "0.png"), "--concentrations"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["order"] == ["H", "E"]
    w = stain_from_json(doc)
    assert np.asarray(doc["h"]).shape == (2, doc["width"] * doc["height"])
    assert w[0, 0] > w[0, 1]


def test_random_augment_is_deterministic(data_dir, budget_file, tmp_path):
    args = ["augment", "--mode", "random", "--images", str(data_dir / "2"), "--budget", str(budget_file),
            "--seed", "7", "--out"]
    assert run(args + [str(tmp_path / "a")]) == 0
    assert run(args + [str(tmp_path / "b")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert len(files) == 4
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    record = json.loads((tmp_path / "a" / "perturbations.json").read_text())
    assert set(record) == {str(f) for f in files}


def test_adversarial_augment_needs_model(data_dir, budget_file, tmp_path):
    assert run(["augment", "--mode", "adversarial", "--images", str(data_dir / "2"),
                "--budget", str(budget_file), "--out", str(tmp_path / "x")]) == 1


def test_adversarial_augment_with_model(data_dir, budget_file, model_file, tmp_path):
    assert run(["augment", "--mode", "adversarial", "--image", str(data_dir / "2" / "0" / "0.png"),
                "--budget", str(budget_file), "--model", str(model_file), "--out", str(tmp_path / "adv")]) == 0
    assert read_png(tmp_path / "adv" / "0.png").shape == (32, 32, 3)


def test_attack_outputs(data_dir, budget_file, model_file, tmp_path):
    out_json = tmp_path / "attack.json"
    assert run(["attack", "--image", str(data_dir / "3" / "1" / "1.png"), "--budget", str(budget_file),
                "--model", str(model_file), "--k", "3", "--label", "1",
                "--out-image", str(tmp_path / "adv.png"), "--out-json", str(out_json)]) == 0
    doc = json.loads(out_json.read_text())
    assert len(doc["loss_trajectory"]) == 4
    assert max(doc["loss_trajectory"]) >= doc["clean_loss"]
    assert np.asarray(doc["perturbation"]["delta_w"]).shape == (3, 2)
    assert (tmp_path / "adv.png").exists()


def test_eval_reports_groups(data_dir, model_file, capsys):
    assert run(["eval", "--model", str(model_file), "--data", str(data_dir)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert 0 <= doc["acc_wg"] <= doc["acc_avg"] <= 1
    assert {(g["center"], g["label"]) for g in doc["per_group"]} == {(2, 0), (2, 1)}


def test_missing_file_is_io_error(tmp_path):
    assert run(["decompose", "--image", str(tmp_path / "none.png")]) == 3
    assert run(["eval", "--model", str(tmp_path / "none.json"), "--data", str(tmp_path)]) == 3


def test_blank_image_is_data_error(tmp_path):
    Image.new("RGB", (16, 16), (255, 255, 255)).save(tmp_path / "white.png")
    assert run(["decompose", "--image", str(tmp_path / "white.png")]) == 2


def test_bad_generator_setting_is_data_error(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"no_such_setting": 1}))
    assert run(["generate", "--out", str(tmp_path / "d"), "--config", str(tmp_path / "c.json")]) == 2


def test_seed_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("CASA_SEED", "11")
    args = ["generate", "--train-per-class", "1", "--heldout-per-class", "1", "--out"]
    assert run(args + [str(tmp_path / "env")]) == 0
    monkeypatch.delenv("CASA_SEED")
    assert run(args + [str(tmp_path / "flag"), "--seed", "11"]) == 0
    a = json.loads((tmp_path / "env" / "manifest.json").read_text())
    b = json.loads((tmp_path / "flag" / "manifest.json").read_text())
    assert a == b and a["seed"] == 11
