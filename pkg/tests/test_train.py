import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bsmseg.bsm import BsmConfig
from bsmseg.data import SyntheticSpec, generate_synthetic_tiles
from bsmseg.model import SegModelConfig, build_model, load_checkpoint
from bsmseg.train import (LOSS_WEIGHTS, TrainConfig, TrainingError, batch_indices,
                          combine_scale_losses, multiscale_loss, pixel_ce_loss, poly_lr,
                          read_train_log, train)
from oracles import pyramid_with_losses


def test_ce_saturation_and_uniform():
    labels = torch.randint(0, 2, (2, 8, 8), generator=torch.Generator().manual_seed(0))
    onehot = torch.nn.functional.one_hot(labels, 2).permute(0, 3, 1, 2).double()
    assert pixel_ce_loss(onehot * 20.0, labels) < 1e-6
    assert pixel_ce_loss(torch.zeros(2, 2, 8, 8), labels).item() == pytest.approx(math.log(2), abs=1e-6)
    assert math.log(2) == pytest.approx(0.693147, abs=1e-6)


def test_ce_masks_invalid_pixels():
    scores = torch.zeros(1, 2, 2, 2)
    scores[0, 1, 0, 0] = 50.0  # badly wrong at one pixel
    labels = torch.zeros(1, 2, 2, dtype=torch.long)
    valid = torch.ones(1, 2, 2, dtype=torch.bool)
    valid[0, 0, 0] = False
    assert pixel_ce_loss(scores, labels, valid).item() == pytest.approx(math.log(2))
    assert pixel_ce_loss(scores, labels, torch.zeros_like(valid)).item() == 0.0


def test_ce_errors():
    with pytest.raises(ValueError):
        pixel_ce_loss(torch.zeros(1, 2, 2, 2), torch.full((1, 2, 2), 2))
    with pytest.raises(ValueError):
        pixel_ce_loss(torch.zeros(1, 2, 2, 2), torch.zeros(1, 3, 2, dtype=torch.long))


def test_scale_weighting_examples():
    assert combine_scale_losses([1.0] * 5) == 1.5
    assert combine_scale_losses([0.0] * 5) == 0.0
    assert combine_scale_losses([0.1, 0.2, 0.3, 0.4, 0.5]) == pytest.approx(0.50, abs=1e-12)
    with pytest.raises(ValueError):
        combine_scale_losses([1.0] * 4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 5.0), min_size=5, max_size=5))
def test_multiscale_loss_equals_weighted_sum(losses):
    pyramid, labels = pyramid_with_losses(losses)
    total, per_scale = multiscale_loss(pyramid, labels)
    np.testing.assert_allclose([float(p) for p in per_scale], losses, rtol=1e-12)
    expected = 0.25 * sum(losses[:4]) + 0.5 * losses[4]
    assert float(total) == pytest.approx(expected, rel=1e-12)


def test_multiscale_downsamples_labels_by_nearest():
    labels = torch.zeros(1, 32, 32, dtype=torch.long)
    labels[0, ::16, ::16] = 1  # only the pixels the 1/16 map samples
    pyramid = [torch.zeros(1, 2, 32 >> k, 32 >> k) for k in (4, 3, 2, 1, 0)]
    pyramid[0][:, 1] = 30.0  # predicts building everywhere at 1/16
    _, per_scale = multiscale_loss(pyramid, labels)
    assert per_scale[0].item() < 1e-6


def test_multiscale_mismatch():
    with pytest.raises(ValueError):
        multiscale_loss([torch.zeros(1, 2, 3, 3)] * 5, torch.zeros(1, 32, 32, dtype=torch.long))
    with pytest.raises(ValueError):
        multiscale_loss([torch.zeros(1, 2, 2, 2)] * 4, torch.zeros(1, 32, 32, dtype=torch.long))


def test_poly_lr():
    assert poly_lr(1e-4, 0, 100) == 1e-4
    assert poly_lr(1e-4, 100, 100) == 0.0
    assert poly_lr(1.0, 50, 100) == pytest.approx(0.535887, abs=1e-6)
    assert 0.5 ** 0.9 == pytest.approx(0.535887, abs=1e-6)
    lrs = [poly_lr(1.0, i, 37) for i in range(38)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        poly_lr(1e-4, 0, 0)
    with pytest.raises(ValueError):
        poly_lr(1e-4, 5, 4)


def test_config_validation():
    assert TrainConfig().loss_weights == LOSS_WEIGHTS == (0.25, 0.25, 0.25, 0.25, 0.5)
    for kw in (dict(base_lr=0), dict(poly_power=0), dict(batch_size=0), dict(loss_weights=(1.0,)),
               dict(total_iterations=-1), dict(workers=0)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


@pytest.fixture(scope="module")
def tiles():
    return generate_synthetic_tiles(SyntheticSpec(n_tiles=32, tile_size=64))


def _cfg(**kw):
    base = dict(base_lr=1e-3, batch_size=4, total_iterations=20, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_smoke_descent(tiles):
    assert len(tiles) == 64
    model = build_model(SegModelConfig.tiny(), seed=0)
    result = train(model, tiles, BsmConfig(), _cfg(total_iterations=200))
    losses = result.losses()
    assert len(losses) == 200 and all(math.isfinite(v) for v in losses)
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_zero_iterations_keeps_initialisation(tiles, tmp_path):
    model = build_model(SegModelConfig.tiny(), seed=2)
    init = {k: v.clone() for k, v in model.state_dict().items()}
    result = train(model, tiles, BsmConfig(), _cfg(total_iterations=0), tmp_path)
    assert result.log == []
    back, meta = load_checkpoint(result.checkpoint)
    assert meta["iteration"] == 0
    for k, v in back.state_dict().items():
        assert torch.equal(v, init[k])


def test_rerun_gives_identical_log_and_weights(tiles, tmp_path):
    runs = []
    for name in ("a", "b"):
        model = build_model(SegModelConfig.tiny(), seed=1)
        runs.append((train(model, tiles, BsmConfig(), _cfg(), tmp_path / name, trace=True), model))
    (r1, m1), (r2, m2) = runs
    assert r1.log == r2.log and r1.data_order_hash == r2.data_order_hash
    assert (tmp_path / "a" / "train_log.tsv").read_bytes() == (tmp_path / "b" / "train_log.tsv").read_bytes()
    assert (tmp_path / "a" / "aug_trace.jsonl").read_bytes() == (tmp_path / "b" / "aug_trace.jsonl").read_bytes()
    for (k, v), (_, w) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(v, w), k
    assert read_train_log(tmp_path / "a" / "train_log.tsv") == r1.log
    assert len((tmp_path / "a" / "aug_trace.jsonl").read_text().splitlines()) == 20


def test_workers_do_not_change_the_run(tiles):
    logs = []
    for workers in (1, 3):
        model = build_model(SegModelConfig.tiny(), seed=1)
        logs.append(train(model, tiles, BsmConfig(), _cfg(total_iterations=8, workers=workers)).log)
    assert logs[0] == logs[1]


def test_log_records_schedule(tiles, tmp_path):
    model = build_model(SegModelConfig.tiny(), seed=0)
    result = train(model, tiles, BsmConfig(enabled=()), _cfg(total_iterations=10, checkpoint_every=5), tmp_path)
    assert [r[0] for r in result.log] == list(range(10))
    assert [r[2] for r in result.log] == [poly_lr(1e-3, i, 10) for i in range(10)]
    assert (tmp_path / "checkpoint_000005.npz").is_file() and (tmp_path / "checkpoint_000010.npz").is_file()


def test_batch_indices_are_seeded():
    a = batch_indices(0, 5, 100, 16)
    assert a.tolist() == batch_indices(0, 5, 100, 16).tolist()
    assert a.tolist() != batch_indices(0, 6, 100, 16).tolist()
    assert len(set(a.tolist())) == 16
    assert len(batch_indices(0, 0, 3, 8)) == 8


def test_missing_iterations_and_empty_split(tiles):
    model = build_model(SegModelConfig.tiny())
    with pytest.raises(ValueError, match="total_iterations"):
        train(model, tiles, BsmConfig(), TrainConfig(batch_size=4, total_iterations=None))
    with pytest.raises(ValueError, match="empty"):
        train(model, [], BsmConfig(), _cfg())


def test_non_finite_loss_aborts_with_checkpoint(tiles, tmp_path, monkeypatch):
    model = build_model(SegModelConfig.tiny())
    real = model.forward_train
    calls = {"n": 0}

    def poisoned(x):
        calls["n"] += 1
        out = real(x)
        return [o * float("nan") for o in out] if calls["n"] == 3 else out

    monkeypatch.setattr(model, "forward_train", poisoned)
    with pytest.raises(TrainingError, match="iteration 2"):
        train(model, tiles, BsmConfig(), _cfg(), tmp_path)
    _, meta = load_checkpoint(tmp_path / "last_good.npz")
    assert meta["iteration"] == 2
    assert len(read_train_log(tmp_path / "train_log.tsv")) == 2
