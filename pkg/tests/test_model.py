import numpy as np
import pytest
import torch

from bsmseg.model import (SCALES, AttentionFuse, PositionAttention, SegModel, SegModelConfig,
                          build_model, load_checkpoint, load_encoder_weights, predict_mask,
                          save_checkpoint)
from oracles import gradient_check


def _images(n, size, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, size, size, generator=g) * 255).to(dtype)


@pytest.mark.parametrize("n,size", [(2, 64), (1, 512)])
def test_pyramid_shapes(n, size):
    model = build_model(SegModelConfig.tiny(), seed=0)
    with torch.no_grad():
        pyramid = model.forward_train(_images(n, size))
    assert [tuple(p.shape) for p in pyramid] == [(n, 2, int(size * s), int(size * s)) for s in SCALES]
    assert [p.shape[-1] / size for p in pyramid] == list(SCALES)


def test_infer_equals_last_training_map_in_eval_mode():
    model = build_model(SegModelConfig(), seed=1).eval()
    x = _images(2, 64, 3)
    with torch.no_grad():
        assert torch.equal(model.forward_infer(x), model.forward_train(x)[4])
        assert torch.equal(model(x), model.forward_train(x)[4])
    model.train()
    assert isinstance(model(x), list)


def test_batch_of_one_and_argmax_mask():
    model = build_model(SegModelConfig.tiny()).eval()
    with torch.no_grad():
        scores = model.forward_infer(_images(1, 32))
    mask = predict_mask(scores)
    assert mask.shape == (1, 32, 32) and mask.dtype == bool
    logits = torch.randn(2, 2, 5, 7, generator=torch.Generator().manual_seed(0))
    np.testing.assert_array_equal(predict_mask(logits), (logits[:, 1] > logits[:, 0]).numpy())


def test_indivisible_size_rejected():
    with pytest.raises(ValueError, match="divisible by 16"):
        build_model(SegModelConfig.tiny()).forward_train(_images(1, 40))


def test_config_validation():
    with pytest.raises(ValueError):
        SegModelConfig(encoder_channels=(8, 8, 8, 8))
    with pytest.raises(ValueError):
        SegModelConfig(num_classes=1)
    with pytest.raises(ValueError):
        SegModelConfig(attention="serial")
    assert SegModelConfig.full_scale().encoder_channels == (64, 128, 256, 512, 512)


def test_gradient_check():
    errors = gradient_check(20)
    assert len(errors) == 20 and max(errors) < 1e-3


def test_attention_weights_in_unit_interval_and_zero_input():
    att = AttentionFuse(8, 2)
    x = torch.randn(2, 8, 4, 4)
    cw, pw = att.channel.weights(x), att.position.weights(x)
    assert ((cw > 0) & (cw < 1)).all() and ((pw > 0) & (pw < 1)).all()
    out = att(torch.zeros(1, 8, 4, 4))
    assert out.shape == (1, 8, 4, 4) and torch.isfinite(out).all()


def test_saturated_attention_doubles_input(monkeypatch):
    att = AttentionFuse(8, 2)
    monkeypatch.setattr(att.channel, "weights", lambda x: torch.ones(x.shape[0], x.shape[1], 1, 1))
    monkeypatch.setattr(att.position, "weights", lambda x: torch.ones(x.shape[0], 1, *x.shape[2:]))
    x = torch.randn(2, 8, 4, 4)
    assert torch.equal(att(x), 2 * x)


def test_position_attention_is_non_local():
    torch.manual_seed(0)
    pam = PositionAttention(8, 2)
    x = torch.randn(1, 8, 6, 6)
    y = x.clone()
    y[0, :, 0, 0] += 3.0
    with torch.no_grad():
        diff = (pam(x) - pam(y)).abs().sum(dim=1)[0]
    diff[0, 0] = 0.0
    assert (diff > 1e-6).sum() >= 1
    # the far corner is influenced too
    assert diff[5, 5] > 0


def test_outputs_finite_on_random_inputs():
    model = build_model(SegModelConfig.tiny()).eval()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(10):
            x = torch.rand(100, 3, 16, 16, generator=g) * 255
            assert torch.isfinite(model(x)).all()


def test_attention_off_is_supported():
    model = build_model(SegModelConfig(attention="off"))
    assert not any(k.startswith("attention.") for k in model.state_dict())
    with torch.no_grad():
        assert len(model.forward_train(_images(1, 32))) == 5


def test_build_is_seeded_and_does_not_touch_global_rng():
    torch.manual_seed(5)
    before = torch.rand(1)
    torch.manual_seed(5)
    a = build_model(SegModelConfig.tiny(), seed=3)
    assert torch.equal(torch.rand(1), before)
    b = build_model(SegModelConfig.tiny(), seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(SegModelConfig.tiny(), seed=4).eval()
    path = tmp_path / "ckpt.npz"
    save_checkpoint(model, path, iteration=12)
    back, meta = load_checkpoint(path)
    back.eval()
    assert meta["iteration"] == 12 and meta["format"] == "bsmseg-checkpoint/1"
    assert len(meta["config_hash"]) == 16
    x = _images(1, 32)
    with torch.no_grad():
        assert torch.equal(model(x), back(x))


def test_checkpoint_bad_format(tmp_path):
    np.savez(tmp_path / "x.npz", __meta__=np.array('{"format": "other"}'))
    with pytest.raises(ValueError, match="unsupported"):
        load_checkpoint(tmp_path / "x.npz")


def test_pretrained_encoder_weights(tmp_path):
    src = build_model(SegModelConfig.tiny(), seed=8)
    save_checkpoint(src, tmp_path / "enc.npz")
    dst = SegModel(SegModelConfig.tiny())
    load_encoder_weights(dst, tmp_path / "enc.npz")
    for k, v in src.state_dict().items():
        if k.startswith("encoder."):
            assert torch.equal(v, dst.state_dict()[k])
    other = build_model(SegModelConfig(), seed=0)
    with pytest.raises(ValueError, match="does not fit"):
        load_encoder_weights(other, tmp_path / "enc.npz")
