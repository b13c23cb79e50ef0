import json

import numpy as np
import pytest

from towelfold.cli import draw_overlay, main, parse_run_config
from towelfold.errors import ConfigError
from towelfold.nnet import Checkpoint, ModelSpec, init_params, save_checkpoint
from towelfold.render.dataset import write_image


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_datagen_twice_same_hash(tmp_path, capsys):
    hashes = []
    for name in ("a", "b"):
        code, out, _ = run(["datagen", "--n", "4", "--seed", "1", "--resolution", "32",
                            "--out", str(tmp_path / name), "--json"], capsys)
        assert code == 0
        hashes.append(json.loads(out)["content_hash"])
    assert hashes[0] == hashes[1]
    assert json.loads((tmp_path / "a" / "run_config.json").read_text())["seed"] == 1


def test_datagen_refuses_existing_output(tmp_path, capsys):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "keep.txt").write_text("data")
    code, _, err = run(["datagen", "--n", "1", "--out", str(tmp_path / "x")], capsys)
    assert code == 2 and "not empty" in err


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["datagen", "--n", "1", "--bogus"])
    assert e.value.code == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("generation:\n  resolution: 32\n  colour: red\n")
    code, _, err = run(["datagen", "--n", "1", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 2 and "colour" in err


def test_missing_inputs_exit_2(tmp_path, capsys):
    code, _, err = run(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "t")], capsys)
    assert code == 2 and "not found" in err
    code, _, _ = run(["datagen", "--n", "1", "--config", str(tmp_path / "missing.yaml")], capsys)
    assert code == 2


def test_parse_run_config_sections():
    cfg = parse_run_config({"seed": 4, "fold": {"arc_height": 0.2}, "benchmark": {"settings": ["distractors"]}})
    assert cfg.seed == 4 and cfg.fold.arc_height == 0.2 and cfg.benchmark.settings == ("distractors",)
    with pytest.raises(ConfigError):
        parse_run_config({"training": {"epocs": 3}})


def test_json_config_accepted(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"generation": {"resolution": 32}, "seed": 9}))
    code, out, _ = run(["datagen", "--n", "2", "--config", str(cfg), "--out", str(tmp_path / "o"), "--json"], capsys)
    assert code == 0 and json.loads(out)["seed"] == 9 and json.loads(out)["resolution"] == 32


def _blank_checkpoint(path, bias=-40.0):
    spec = ModelSpec(base_channels=2, depth=2, bottleneck_blocks=0)
    params = init_params(spec, 0)
    params["head.w"][...] = 0
    params["head.b"][...] = bias
    save_checkpoint(path, Checkpoint(spec, params, meta={"train_config": {"resolution": 32}}))


def test_detect_all_zero_heatmap(tmp_path, capsys):
    _blank_checkpoint(tmp_path / "m.ckpt")
    write_image(tmp_path / "img.ppm", np.zeros((32, 32, 3), dtype=np.uint8))
    code, out, _ = run(["detect", str(tmp_path / "img.ppm"), "--checkpoint", str(tmp_path / "m.ckpt"),
                        "--overlay", str(tmp_path / "ov.png")], capsys)
    assert code == 0
    payload = json.loads(out)
    assert payload["keypoints"] == []
    assert (tmp_path / "ov.png").exists()


def test_detect_reports_keypoints_in_image_pixels(tmp_path, capsys):
    # constant output 0.5 everywhere: a single plateau reported at its first pixel
    _blank_checkpoint(tmp_path / "m.ckpt", bias=0.0)
    write_image(tmp_path / "img.png", np.zeros((64, 64, 3), dtype=np.uint8))
    code, out, _ = run(["detect", str(tmp_path / "img.png"), "--checkpoint", str(tmp_path / "m.ckpt")], capsys)
    kps = json.loads(out)["keypoints"]
    assert code == 0 and len(kps) == 1
    assert (kps[0]["u"], kps[0]["v"]) == (0.5, 0.5)  # pixel (0, 0) at 32 px maps to 0.5 at 64 px


def test_overlay_discs():
    img = np.zeros((20, 20, 3), dtype=np.uint8)
    out = draw_overlay(img, [(10, 10)], (255, 255, 0), radius=3)
    assert tuple(out[10, 10]) == (255, 255, 0) and tuple(out[10, 13]) == (255, 255, 0)
    assert tuple(out[10, 14]) == (0, 0, 0) and tuple(out[12, 13]) == (0, 0, 0)
    assert not img.any()


def test_fold_bench_oracle(tmp_path, capsys):
    code, out, _ = run(["fold-bench", "--oracle", "--n", "6", "--out", str(tmp_path / "fb"), "--json",
                        "--sweep", "0,4"], capsys)
    rep = json.loads(out)
    assert code == 0
    assert rep["grasp_successes"] == rep["fold_successes"] == 6
    assert (tmp_path / "fb" / "benchmark.json").exists() and (tmp_path / "fb" / "trials.csv").exists()
    assert rep["noise_sweep"][0]["fold_rate"] == 1.0


def test_fold_bench_needs_checkpoint(tmp_path, capsys):
    code, _, err = run(["fold-bench", "--n", "2", "--out", str(tmp_path / "fb")], capsys)
    assert code == 2 and "--checkpoint" in err


def test_train_then_eval(tmp_path, capsys):
    data = tmp_path / "d"
    assert run(["datagen", "--n", "6", "--resolution", "32", "--out", str(data)], capsys)[0] == 0
    code, out, _ = run(["train", "--data", str(data), "--epochs", "1", "--resolution", "32", "--base-channels", "2",
                        "--out", str(tmp_path / "t"), "--json"], capsys)
    assert code == 0
    report = json.loads(out)
    assert len(report["epochs"]) == 1
    code, out, _ = run(["eval", "--data", str(data), "--checkpoint", str(tmp_path / "t" / "best.ckpt"),
                        "--thresholds", "2,4", "--out", str(tmp_path / "e"), "--json"], capsys)
    assert code == 0
    assert set(json.loads(out)["ap_at"]) == {"2", "4"}
