"""Within-batch style mixing: shuffle, encode, AdaIN, interpolate, decode.

Two feature transforms are available. ``PixelTransform`` is the identity, so
AdaIN re-normalizes the image channels directly (a Wallis-type filter).
``ConvTransform`` runs a convolutional encoder/decoder loaded from a weight
archive (see ``load_style_network``).

Statistics use the population standard deviation over the spatial extent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import SampleBatch

STYLE_NET_FORMAT = "bsmseg-style-net/1"


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray  # N x C
    std: np.ndarray  # N x C


@dataclass(frozen=True)
class StyleMixConfig:
    alpha: float = 0.5
    epsilon: float = 1e-5
    transform: str = "pixel"  # "pixel" or "conv"
    weights_path: str | None = None
    masked_stats: bool = True  # exclude padding pixels from pixel-space statistics

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.transform not in ("pixel", "conv"):
            raise ValueError(f"unknown style transform {self.transform!r}")
        if self.transform == "conv" and not self.weights_path:
            raise ValueError("the conv style transform needs weights_path")


def channel_stats(f: np.ndarray, valid: np.ndarray | None = None) -> ChannelStats:
    """Per-sample, per-channel mean and population std over the spatial extent.

    ``valid`` (N x H x W bool) restricts the statistics to flagged pixels; a
    sample without any valid pixel falls back to all pixels.
    """
    f = np.asarray(f)
    if f.ndim != 4 or f.shape[2] * f.shape[3] < 1:
        raise ValueError(f"expected a non-empty N x C x H x W tensor, got shape {f.shape}")
    if valid is None:
        return ChannelStats(mean=f.mean(axis=(2, 3)), std=f.std(axis=(2, 3)))
    if valid.shape != (f.shape[0],) + f.shape[2:]:
        raise ValueError(f"valid map {valid.shape} does not match features {f.shape}")
    w = valid.astype(np.float64)
    w[~valid.any(axis=(1, 2))] = 1.0
    w = w[:, None] / w.sum(axis=(1, 2))[:, None, None, None]
    mean = (f * w).sum(axis=(2, 3))
    var = (((f - mean[..., None, None]) ** 2) * w).sum(axis=(2, 3))
    return ChannelStats(mean=mean, std=np.sqrt(var))


def adain(f_c: np.ndarray, f_s: np.ndarray, eps: float = 1e-5,
          valid_c: np.ndarray | None = None, valid_s: np.ndarray | None = None) -> np.ndarray:
    """Give each content channel the mean and std of the matching style channel.

    With valid maps, statistics come from valid pixels only and invalid
    content pixels are passed through unchanged.
    """
    if f_c.shape[:2] != f_s.shape[:2]:
        raise ValueError(f"content {f_c.shape} and style {f_s.shape} differ in N or C")
    c, s = channel_stats(f_c, valid_c), channel_stats(f_s, valid_s)
    scale = (s.std / (c.std + eps))[..., None, None]
    out = (f_c - c.mean[..., None, None]) * scale + s.mean[..., None, None]
    if valid_c is not None:
        out = np.where(valid_c[:, None], out, f_c)
    return out


def mix_interpolate(f_cs: np.ndarray, f_c: np.ndarray, alpha: float) -> np.ndarray:
    if f_cs.shape != f_c.shape:
        raise ValueError(f"shape mismatch: {f_cs.shape} vs {f_c.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return f_c.copy()
    if alpha == 1.0:
        return f_cs.copy()
    return alpha * f_cs + (1.0 - alpha) * f_c


def shuffle_batch(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation; content sample i takes its style from sample perm[i]."""
    if n < 1:
        raise ValueError("cannot shuffle an empty batch")
    return rng.permutation(n)


# ---------------------------------------------------------------------------
# feature transforms


class PixelTransform:
    layout = "pixel"

    def encode(self, images: np.ndarray) -> np.ndarray:
        return images.astype(np.float64)

    def decode(self, features: np.ndarray) -> np.ndarray:
        return np.clip(features, 0.0, 255.0)


def _build_layers(spec: list[dict], arrays: dict, prefix: str) -> nn.Sequential:
    layers = []
    for i, layer in enumerate(spec):
        kind = layer["type"]
        if kind == "conv":
            k, pad = int(layer["kernel"]), layer.get("pad", "reflect")
            if pad == "reflect" and k > 1:
                layers.append(nn.ReflectionPad2d(k // 2))
            conv = nn.Conv2d(int(layer["in"]), int(layer["out"]), k,
                             padding=k // 2 if pad == "zero" else 0)
            name = layer.get("name", f"{prefix}.{i}")
            try:
                w, b = arrays[f"{name}.weight"], arrays[f"{name}.bias"]
            except KeyError as exc:
                raise ValueError(f"style weights: missing array {exc.args[0]}") from None
            if w.shape != tuple(conv.weight.shape) or b.shape != tuple(conv.bias.shape):
                raise ValueError(f"style weights: {name} has shapes {w.shape}/{b.shape}, "
                                 f"topology expects {tuple(conv.weight.shape)}")
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(np.asarray(w, dtype=np.float32)))
                conv.bias.copy_(torch.from_numpy(np.asarray(b, dtype=np.float32)))
            layers.append(conv)
        elif kind == "relu":
            layers.append(nn.ReLU())
        elif kind == "maxpool":
            layers.append(nn.MaxPool2d(int(layer.get("kernel", 2)), ceil_mode=True))
        elif kind == "upsample":
            layers.append(nn.Upsample(scale_factor=int(layer.get("factor", 2)), mode="nearest"))
        else:
            raise ValueError(f"style weights: unknown layer type {kind!r}")
    net = nn.Sequential(*layers).eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


class ConvTransform:
    """Convolutional encoder/decoder pair; weights are frozen after loading."""

    layout = "conv"

    def __init__(self, encoder: nn.Module, decoder: nn.Module,
                 input_scale: float = 1.0 / 255.0, output_scale: float = 255.0):
        self.encoder, self.decoder = encoder, decoder
        self.input_scale, self.output_scale = input_scale, output_scale

    def encode(self, images: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.from_numpy(np.asarray(images, dtype=np.float32) * self.input_scale)
            return self.encoder(x).double().numpy()

    def decode(self, features: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            y = self.decoder(torch.from_numpy(features.astype(np.float32))).double().numpy()
        return np.clip(y * self.output_scale, 0.0, 255.0)


def save_style_network(path, topology: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(topology, format=STYLE_NET_FORMAT)
    np.savez(path, __topology__=np.array(json.dumps(header)), **arrays)


def load_style_network(path) -> ConvTransform:
    """Load an encoder/decoder archive.

    The archive is an ``.npz`` holding ``__topology__`` (a JSON string with
    ``format``, ``encoder``, ``decoder`` layer lists and optional
    ``input_scale``/``output_scale``) plus ``<layer name>.weight`` and
    ``<layer name>.bias`` arrays for every conv layer.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"style network weights not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (ValueError, OSError) as exc:
        raise ValueError(f"{path}: not a readable weight archive ({exc})") from None
    if "__topology__" not in arrays:
        raise ValueError(f"{path}: missing __topology__ header")
    header = json.loads(str(arrays.pop("__topology__")))
    if header.get("format") != STYLE_NET_FORMAT:
        raise ValueError(f"{path}: unsupported format {header.get('format')!r}")
    return ConvTransform(
        _build_layers(header["encoder"], arrays, "encoder"),
        _build_layers(header["decoder"], arrays, "decoder"),
        input_scale=float(header.get("input_scale", 1.0 / 255.0)),
        output_scale=float(header.get("output_scale", 255.0)),
    )


def adain_vgg_topology() -> dict:
    """Layer layout of the VGG-19 (up to relu4_1) AdaIN encoder and its mirror decoder.

    Converted reference weights must use these layer names.
    """
    def conv(name, i, o, k=3):
        return {"name": name, "type": "conv", "in": i, "out": o, "kernel": k, "pad": "reflect"}

    relu, pool, up = {"type": "relu"}, {"type": "maxpool", "kernel": 2}, {"type": "upsample", "factor": 2}
    encoder = [
        conv("enc.conv0", 3, 3, 1),
        conv("enc.conv1_1", 3, 64), relu, conv("enc.conv1_2", 64, 64), relu, pool,
        conv("enc.conv2_1", 64, 128), relu, conv("enc.conv2_2", 128, 128), relu, pool,
        conv("enc.conv3_1", 128, 256), relu, conv("enc.conv3_2", 256, 256), relu,
        conv("enc.conv3_3", 256, 256), relu, conv("enc.conv3_4", 256, 256), relu, pool,
        conv("enc.conv4_1", 256, 512), relu,
    ]
    decoder = [
        conv("dec.conv4_1", 512, 256), relu, up,
        conv("dec.conv3_4", 256, 256), relu, conv("dec.conv3_3", 256, 256), relu,
        conv("dec.conv3_2", 256, 256), relu, conv("dec.conv3_1", 256, 128), relu, up,
        conv("dec.conv2_2", 128, 128), relu, conv("dec.conv2_1", 128, 64), relu, up,
        conv("dec.conv1_2", 64, 64), relu, conv("dec.conv1_1", 64, 3),
    ]
    return {"encoder": encoder, "decoder": decoder, "input_scale": 1.0 / 255.0, "output_scale": 255.0}


def make_transform(cfg: StyleMixConfig):
    if cfg.transform == "pixel":
        return PixelTransform()
    return load_style_network(cfg.weights_path)


# ---------------------------------------------------------------------------
# batch pipeline


def style_mix_features(images: np.ndarray, perm: np.ndarray, cfg: StyleMixConfig,
                       transform=None, valid: np.ndarray | None = None) -> np.ndarray:
    """``valid`` masks padding out of the statistics; honoured only in pixel space."""
    transform = transform or make_transform(cfg)
    f_c = transform.encode(images)
    f_s = f_c[perm]  # encoding is per-sample, so encode(X_c[perm]) == encode(X_c)[perm]
    if transform.layout != "pixel":
        valid = None
    f_cs = adain(f_c, f_s, cfg.epsilon, valid, None if valid is None else valid[perm])
    f_ccs = mix_interpolate(f_cs, f_c, cfg.alpha)
    out = transform.decode(f_ccs)
    if out.shape != images.shape:
        raise ValueError(f"style decoder returned {out.shape} for input {images.shape}")
    return out.astype(images.dtype)


def style_mix_batch(batch: SampleBatch, cfg: StyleMixConfig, rng: np.random.Generator,
                    transform=None) -> tuple[SampleBatch, np.ndarray]:
    """Re-style every image with the statistics of a shuffled partner.

    Masks and valid maps pass through untouched. Returns the mixed batch and
    the permutation used.
    """
    perm = shuffle_batch(len(batch), rng)
    valid = batch.valid if cfg.masked_stats else None
    images = style_mix_features(batch.images, perm, cfg, transform, valid)
    return batch.replace(images=images), perm
