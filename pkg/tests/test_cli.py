import json

import numpy as np
import pytest
from PIL import Image

from bsmseg.cli import main
from bsmseg.data import DatasetManifest

SMALL = """\
seed: 3
data:
  synthetic:
    n_tiles: 6
    tile_size: 32
    building_size: [4, 10]
train:
  batch_size: 2
  total_iterations: 3
  base_lr: 0.001
model:
  encoder_channels: [4, 6, 8, 8, 8]
  convs_per_stage: [1, 1, 1, 1, 1]
  attention_reduction: 2
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL)
    return path


def _json_without_timing(path):
    d = json.loads(path.read_text())
    d.pop("seconds", None)
    for r in d.get("rows", []):
        r.pop("train_seconds", None)
    return d


def test_unknown_command_prints_usage(capsys):
    assert main(["frobnicate"]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "frobnicate" in err


def test_bad_config_is_reported(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("train:\n  nope: 1\n")
    assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == 1
    assert "train.nope" in capsys.readouterr().err


def test_train_without_data_fails_cleanly(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "o")]) == 1
    assert "synth" in capsys.readouterr().err


def test_defaults_end_to_end(tmp_path, capsys):
    out = tmp_path / "run"
    for cmd in ("synth", "train", "eval"):
        assert main([cmd, "--out", str(out)]) == 0, cmd
    assert "mIoU" in capsys.readouterr().out
    assert (out / "train" / "model.npz").is_file()
    for ext in ("json", "tsv", "png"):
        assert (out / "eval" / f"report.{ext}").is_file()
    assert len((out / "train" / "train_log.tsv").read_text().splitlines()) == 200


def test_frozen_config_reproduces_run(tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    for cmd in ("synth", "train", "eval"):
        assert main([cmd, "--config", str(small_cfg), "--out", str(a), "--trace"]) == 0
    frozen = a / "train" / "config.frozen.yaml"
    assert frozen.is_file() and "seed: 3" in frozen.read_text()
    for cmd in ("synth", "train", "eval"):
        assert main([cmd, "--config", str(frozen), "--out", str(b), "--trace"]) == 0
    for rel in ("train/train_log.tsv", "train/aug_trace.jsonl", "eval/report.tsv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert _json_without_timing(a / "eval" / "report.json") == _json_without_timing(b / "eval" / "report.json")


def test_seed_flag_changes_run(tmp_path, small_cfg):
    for out, seed in (("a", "1"), ("b", "2")):
        for cmd in ("synth", "train"):
            assert main([cmd, "--config", str(small_cfg), "--out", str(tmp_path / out), "--seed", seed]) == 0
    assert (tmp_path / "a/train/train_log.tsv").read_text() != (tmp_path / "b/train/train_log.tsv").read_text()


def test_ablate_preview_and_report(tmp_path, small_cfg, capsys):
    out = tmp_path / "o"
    assert main(["synth", "--config", str(small_cfg), "--out", str(out)]) == 0
    assert main(["ablate", "--config", str(small_cfg), "--out", str(out)]) == 0
    lines = (out / "ablate" / "ablation.tsv").read_text().splitlines()
    assert len(lines) == 9 and lines[-1].startswith("GA + CA + SM (BSM)\t")
    assert main(["stylemix-preview", "--config", str(small_cfg), "--out", str(out)]) == 0
    grid = np.asarray(Image.open(out / "preview" / "stylemix_preview.png"))
    assert grid.shape == (64, 2 * 32, 3)
    capsys.readouterr()
    assert main(["report", "--config", str(small_cfg), "--out", str(out)]) == 0
    assert "GA + CA + SM (BSM)" in capsys.readouterr().out
    assert (out / "report" / "ablation.png").is_file()


def test_report_without_input_fails(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 1


def test_prepare_tiles_scenes(tmp_path):
    raw = tmp_path / "raw"
    (raw / "images").mkdir(parents=True)
    (raw / "masks").mkdir()
    rng = np.random.default_rng(0)
    for name, (h, w) in {"US_Town_1": (64, 64), "US_Town_2": (40, 64), "NZ_City_1": (32, 32)}.items():
        Image.fromarray(rng.integers(0, 256, (h, w, 3), dtype=np.uint8)).save(raw / "images" / f"{name}.tif")
        mask = np.zeros((h, w), np.uint8)
        mask[:32, :32] = 255 * (rng.random((min(h, 32), min(w, 32))) < 0.3)  # only the top-left tile has buildings
        Image.fromarray(mask).save(raw / "masks" / f"{name}.tif")
    cfg = tmp_path / "prep.yaml"
    cfg.write_text(f"data:\n  raw_dir: {raw}\n  tile_size: 32\n  train_ratio: 0.5\n")
    out = tmp_path / "out"
    assert main(["prepare", "--config", str(cfg), "--out", str(out)]) == 0
    manifest = DatasetManifest.read(out / "data" / "manifest.tsv")
    manifest.check_files()
    ids = sorted(e.id for e in manifest.entries)
    # each scene keeps only its top-left tile; numbering continues across scenes of a city
    assert ids == ["NZ_City_00000", "US_Town_00000", "US_Town_00004"]
    assert {e.city for e in manifest.entries} == {"US_Town", "NZ_City"}
    assert sum(e.split == "train" for e in manifest.entries) == 2
