"""Geometric (GA) and color (CA) batch augmentation.

Geometric ops move images and masks together (bilinear for images, nearest
for masks and the valid-pixel map); color ops touch images only. Each op
fires independently per sample with its own probability; whether the whole
submodule runs is decided by the orchestrator's gate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .data import SampleBatch

PUBLISHED_SCALE_LIMITS = (0.5, 2.0)
_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentationConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.5
    p_scale: float = 0.5
    p_brightness: float = 0.5
    p_color: float = 0.5
    p_contrast: float = 0.5
    p_sharpness: float = 0.5
    p_blur: float = 0.5
    rotation_bound_deg: float = 30.0
    scale_range: tuple[float, float] = (0.5, 2.0)
    brightness_range: tuple[float, float] = (0.5, 1.5)
    color_range: tuple[float, float] = (0.5, 1.5)
    contrast_range: tuple[float, float] = (0.5, 1.5)
    sharpness_range: tuple[float, float] = (0.5, 1.5)
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name.startswith("p_") and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} is not a probability")
            if name.endswith("_range") and (len(value) != 2 or value[0] > value[1]):
                raise ValueError(f"{name}={value} is not an interval")
        if self.scale_range[0] <= 0:
            raise ValueError(f"scale_range must be positive, got {self.scale_range}")
        if self.rotation_bound_deg < 0:
            raise ValueError("rotation_bound_deg must be non-negative")
        if self.blur_sigma_range[0] < 0:
            raise ValueError("blur sigma must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(**{k: 0.0 for k in asdict(cls()) if k.startswith("p_")})


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class GeometricParams:
    hflip: bool = False
    vflip: bool = False
    angle_deg: float = 0.0
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip) and self.angle_deg == 0.0 and self.scale == 1.0


def _affine(shape: tuple[int, int], angle_deg: float, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Forward matrix ``A`` and center ``c``: p_out = c + A @ (p_in - c), (row, col) coords."""
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]])
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    return scale * rot, center


def forward_map(points: np.ndarray, shape: tuple[int, int], params: GeometricParams) -> np.ndarray:
    """Where input pixel coordinates (K x 2, row/col) land after ``params``."""
    pts = np.asarray(points, dtype=np.float64).copy()
    h, w = shape
    if params.vflip:
        pts[:, 0] = h - 1 - pts[:, 0]
    if params.hflip:
        pts[:, 1] = w - 1 - pts[:, 1]
    a, c = _affine(shape, params.angle_deg, params.scale)
    return c + (pts - c) @ a.T


def _warp(plane: np.ndarray, params: GeometricParams, order: int) -> np.ndarray:
    if params.vflip:
        plane = plane[::-1]
    if params.hflip:
        plane = plane[:, ::-1]
    if params.angle_deg == 0.0 and params.scale == 1.0:
        return np.ascontiguousarray(plane)
    a, c = _affine(plane.shape, params.angle_deg, params.scale)
    inv = np.linalg.inv(a)
    return ndimage.affine_transform(plane, inv, offset=c - inv @ c, output_shape=plane.shape,
                                    order=order, mode="constant", cval=0, prefilter=False)


def warp_sample(image: np.ndarray, mask: np.ndarray, valid: np.ndarray,
                params: GeometricParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply one parameter set to a C x H x W image and its H x W mask / valid map."""
    if params.is_identity:
        return image, mask, valid
    out = np.stack([_warp(ch, params, order=1) for ch in image]).astype(image.dtype)
    return (
        out,
        warp_mask(mask, params),
        _warp(valid.astype(np.uint8), params, order=0).astype(bool),
    )


def warp_mask(mask: np.ndarray, params: GeometricParams) -> np.ndarray:
    if params.is_identity:
        return mask
    return _warp(mask.astype(np.uint8), params, order=0).astype(bool)


def scale_then_fit(image: np.ndarray, mask: np.ndarray, s: float,
                   limits: tuple[float, float] | None = PUBLISHED_SCALE_LIMITS):
    """Zoom about the center by ``s``, then crop (s > 1) or zero-fill (s < 1) back to size.

    ``image`` is C x H x W. Pass ``limits=None`` to allow any positive factor.
    """
    if s <= 0:
        raise ValueError(f"scale factor must be positive, got {s}")
    if limits is not None and not limits[0] <= s <= limits[1]:
        raise ValueError(f"scale factor {s} outside the allowed range {limits}")
    params = GeometricParams(scale=float(s))
    valid = np.ones(mask.shape, dtype=bool)
    out_img, out_mask, _ = warp_sample(image, mask, valid, params)
    return out_img, out_mask


def draw_geometric(rng: np.random.Generator, cfg: AugmentationConfig) -> GeometricParams:
    # fixed number of draws per sample keeps the stream aligned across configs
    u = rng.random(4)
    angle = rng.uniform(-cfg.rotation_bound_deg, cfg.rotation_bound_deg)
    scale = rng.uniform(*cfg.scale_range)
    return GeometricParams(
        hflip=bool(u[0] < cfg.p_hflip),
        vflip=bool(u[1] < cfg.p_vflip),
        angle_deg=float(angle) if u[2] < cfg.p_rotate else 0.0,
        scale=float(scale) if u[3] < cfg.p_scale else 1.0,
    )


def apply_geometric_params(batch: SampleBatch, params: list[GeometricParams]) -> SampleBatch:
    if len(params) != len(batch):
        raise ValueError(f"{len(params)} parameter sets for a batch of {len(batch)}")
    if len(batch) == 0:
        return batch
    warped = [warp_sample(img, m, v, p)
              for img, m, v, p in zip(batch.images, batch.masks, batch.valid, params)]
    images, masks, valid = (np.stack(x) for x in zip(*warped))
    return batch.replace(images=images, masks=masks, valid=valid)


def apply_geometric(batch: SampleBatch, cfg: AugmentationConfig, rng: np.random.Generator):
    """Returns the transformed batch and the per-sample parameters drawn."""
    params = [draw_geometric(rng, cfg) for _ in range(len(batch))]
    return apply_geometric_params(batch, params), params


# ---------------------------------------------------------------------------
# color


@dataclass(frozen=True)
class ColorParams:
    brightness: float = 1.0
    color: float = 1.0
    contrast: float = 1.0
    sharpness: float = 1.0
    blur_sigma: float = 0.0


def _blend(img: np.ndarray, base: np.ndarray, factor: float) -> np.ndarray:
    # img + (f - 1)(img - base) is exact at f == 1
    return np.clip(img + (factor - 1.0) * (img - base), 0.0, 255.0)


def _gray(img: np.ndarray) -> np.ndarray:
    return np.tensordot(_LUMA, img[:3], axes=1)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur of a C x H x W image with reflected borders."""
    if sigma <= 0:
        return img
    return ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), mode="reflect")


def color_sample(image: np.ndarray, p: ColorParams) -> np.ndarray:
    img = image.astype(np.float64)
    if p.brightness != 1.0:
        img = _blend(img, 0.0, p.brightness)
    if p.color != 1.0:
        img = _blend(img, _gray(img)[None], p.color)
    if p.contrast != 1.0:
        img = _blend(img, _gray(img).mean(), p.contrast)
    if p.sharpness != 1.0:
        smooth = np.stack([ndimage.convolve(ch, _SMOOTH, mode="reflect") for ch in img])
        img = _blend(img, smooth, p.sharpness)
    if p.blur_sigma > 0:
        img = np.clip(gaussian_blur(img, p.blur_sigma), 0.0, 255.0)
    return img.astype(image.dtype)


def draw_color(rng: np.random.Generator, cfg: AugmentationConfig) -> ColorParams:
    u = rng.random(5)
    vals = [rng.uniform(*r) for r in (cfg.brightness_range, cfg.color_range,
                                      cfg.contrast_range, cfg.sharpness_range,
                                      cfg.blur_sigma_range)]
    probs = (cfg.p_brightness, cfg.p_color, cfg.p_contrast, cfg.p_sharpness)
    factors = [float(v) if ui < p else 1.0 for ui, p, v in zip(u, probs, vals)]
    return ColorParams(*factors, blur_sigma=float(vals[4]) if u[4] < cfg.p_blur else 0.0)


def apply_color_params(batch: SampleBatch, params: list[ColorParams]) -> SampleBatch:
    if len(params) != len(batch):
        raise ValueError(f"{len(params)} parameter sets for a batch of {len(batch)}")
    if len(batch) == 0:
        return batch
    images = np.stack([color_sample(img, p) for img, p in zip(batch.images, params)])
    return batch.replace(images=images)


def apply_color(batch: SampleBatch, cfg: AugmentationConfig, rng: np.random.Generator):
    """Returns the recolored batch (masks untouched) and the per-sample parameters drawn."""
    params = [draw_color(rng, cfg) for _ in range(len(batch))]
    return apply_color_params(batch, params), params
