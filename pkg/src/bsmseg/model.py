"""Building extraction network: VGG-style encoder, parallel channel/position
attention at the bottleneck, and a decoder supervised at five scales.

In training mode the network returns class scores at 1/16, 1/8, 1/4, 1/2 and
1/1 of the input size; at inference only the full-resolution map is produced.
Inputs are raw 0-255 intensities; ImageNet normalization happens inside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._util import stable_hash, to_jsonable

SCALES = (1 / 16, 1 / 8, 1 / 4, 1 / 2, 1 / 1)
CHECKPOINT_FORMAT = "bsmseg-checkpoint/1"
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class SegModelConfig:
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    convs_per_stage: tuple[int, ...] = (2, 2, 2, 2, 2)
    num_classes: int = 2
    attention: str = "parallel"  # "parallel" or "off"
    attention_reduction: int = 8
    pretrained_path: str | None = None

    def __post_init__(self):
        if len(self.encoder_channels) != 5 or len(self.convs_per_stage) != 5:
            raise ValueError("the encoder needs exactly five stages")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.attention not in ("parallel", "off"):
            raise ValueError(f"unknown attention mode {self.attention!r}")

    @classmethod
    def full_scale(cls) -> "SegModelConfig":
        """VGG-16 widths and depths."""
        return cls(encoder_channels=(64, 128, 256, 512, 512), convs_per_stage=(2, 2, 3, 3, 3))

    @classmethod
    def tiny(cls) -> "SegModelConfig":
        return cls(encoder_channels=(4, 6, 8, 8, 8), convs_per_stage=(1, 1, 1, 1, 1),
                   attention_reduction=2)


def _conv_block(cin: int, cout: int, n: int) -> nn.Sequential:
    layers = []
    for i in range(n):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1, bias=False),
                   nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class ChannelAttention(nn.Module):
    """Per-channel gate from pooled descriptors through a shared MLP."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.ReLU(inplace=True),
                                 nn.Conv2d(hidden, channels, 1))

    def weights(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)  # N x C x 1 x 1

    def forward(self, x):
        return x * self.weights(x)


class PositionAttention(nn.Module):
    """Per-site gate computed from a non-local (all-pairs) aggregation over positions."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.query = nn.Conv2d(channels, hidden, 1)
        self.key = nn.Conv2d(channels, hidden, 1)
        self.value = nn.Conv2d(channels, hidden, 1)
        self.gate = nn.Conv2d(hidden, 1, 1)

    def weights(self, x):
        n, _, h, w = x.shape
        q = self.query(x).flatten(2)  # N x c x HW
        k = self.key(x).flatten(2)
        v = self.value(x).flatten(2)
        affinity = torch.softmax(q.transpose(1, 2) @ k / q.shape[1] ** 0.5, dim=-1)  # N x HW x HW
        context = (v @ affinity.transpose(1, 2)).view(n, -1, h, w)
        return torch.sigmoid(self.gate(context))  # N x 1 x H x W

    def forward(self, x):
        return x * self.weights(x)


class AttentionFuse(nn.Module):
    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.position = PositionAttention(channels, reduction)

    def forward(self, x):
        return self.channel(x) + self.position(x)


class SegModel(nn.Module):
    def __init__(self, cfg: SegModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or SegModelConfig()
        ch = cfg.encoder_channels
        self.register_buffer("pixel_mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1) * 255.0)
        self.register_buffer("pixel_std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1) * 255.0)

        self.encoder = nn.ModuleList(
            _conv_block(3 if i == 0 else ch[i - 1], ch[i], cfg.convs_per_stage[i]) for i in range(5)
        )
        self.attention = (AttentionFuse(ch[4], cfg.attention_reduction)
                          if cfg.attention == "parallel" else nn.Identity())
        self.bottom = _conv_block(ch[4], ch[4], 1)
        # decoder stage k (k = 3..0) fuses the upsampled deeper map with encoder stage k
        self.decoder = nn.ModuleList(_conv_block(ch[k + 1], ch[k], 1) for k in range(4))
        self.fuse = nn.ModuleList(_conv_block(2 * ch[k], ch[k], 1) for k in range(4))
        # heads[i] scores scale SCALES[i]
        head_ch = [ch[4], ch[3], ch[2], ch[1], ch[0]]
        self.heads = nn.ModuleList(nn.Conv2d(c, cfg.num_classes, 1) for c in head_ch)

        if cfg.pretrained_path:
            load_encoder_weights(self, cfg.pretrained_path)

    def _features(self, images):
        h, w = images.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"input size {h}x{w} is not divisible by 16")
        x = (images - self.pixel_mean) / self.pixel_std
        skips = []
        for i, stage in enumerate(self.encoder):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = stage(x)
            skips.append(x)
        x = self.bottom(self.attention(x))
        feats = [x]
        for k in (3, 2, 1, 0):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = self.decoder[k](x)
            x = self.fuse[k](torch.cat([x, skips[k]], dim=1))
            feats.append(x)
        return feats

    def forward_train(self, images) -> list[torch.Tensor]:
        """Class scores at scales 1/16, 1/8, 1/4, 1/2, 1/1 (in that order)."""
        return [head(f) for head, f in zip(self.heads, self._features(images))]

    def forward_infer(self, images) -> torch.Tensor:
        return self.heads[4](self._features(images)[4])

    def forward(self, images):
        return self.forward_train(images) if self.training else self.forward_infer(images)


def predict_mask(scores: torch.Tensor) -> np.ndarray:
    """Boolean building masks (N x H x W) from N x C x H x W scores; class 1 = building."""
    return (scores.argmax(dim=1) == 1).cpu().numpy()


def build_model(cfg: SegModelConfig | None = None, seed: int = 0) -> SegModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegModel(cfg)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: SegModel, path, iteration: int = 0, extra: dict | None = None) -> None:
    """Write ``.npz``: one array per state-dict entry plus a ``__meta__`` JSON string."""
    config = to_jsonable(model.cfg)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": config,
        "config_hash": stable_hash(config),
        "iteration": int(iteration),
        **(extra or {}),
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays.pop("__meta__")))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return meta, arrays


def load_checkpoint(path) -> tuple[SegModel, dict]:
    meta, arrays = read_checkpoint(path)
    cfg_dict = dict(meta["config"])
    cfg_dict["pretrained_path"] = None
    for key in ("encoder_channels", "convs_per_stage"):
        cfg_dict[key] = tuple(cfg_dict[key])
    model = SegModel(SegModelConfig(**cfg_dict))
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    model.load_state_dict(state)
    return model, meta


def load_encoder_weights(model: SegModel, path) -> None:
    """Copy ``encoder.*`` arrays from a checkpoint-format archive; shapes must match."""
    _, arrays = read_checkpoint(path)
    own = model.state_dict()
    picked = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith("encoder.")}
    for k, v in picked.items():
        if k not in own or own[k].shape != v.shape:
            raise ValueError(f"{path}: encoder array {k} does not fit this model")
    model.load_state_dict(picked, strict=False)
