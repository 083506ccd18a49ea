"""Independent reference computations shared by the unit and acceptance tests."""

import math

import numpy as np
import torch

from bsmseg.augment import forward_map
from bsmseg.model import SegModelConfig, build_model

# central differences in float64 resolve gradients down to roughly 1e-7 here;
# entries below this floor are redrawn rather than compared against noise
GRAD_FLOOR = 1e-3


def gradient_check(n_params: int = 20, seed: int = 0, h: float = 1e-6) -> list[float]:
    """Relative errors of autograd vs central differences for random scalar parameters
    of the tiny model (double precision, training mode, summed pyramid)."""
    model = build_model(SegModelConfig.tiny(), seed=seed).double().train()
    g = torch.Generator().manual_seed(seed)
    x = (torch.rand(1, 3, 32, 32, generator=g) * 255).double()

    def objective():
        with torch.no_grad():
            return float(sum(p.sum() for p in model.forward_train(x)))

    model.zero_grad()
    sum(p.sum() for p in model.forward_train(x)).backward()
    params = list(model.parameters())
    rng = np.random.default_rng(seed)
    errors = []
    while len(errors) < n_params:
        p = params[rng.integers(len(params))]
        i = int(rng.integers(p.numel()))
        analytic = float(p.grad.view(-1)[i])
        if abs(analytic) < GRAD_FLOOR:
            continue
        flat = p.data.view(-1)
        orig = float(flat[i])
        flat[i] = orig + h
        up = objective()
        flat[i] = orig - h
        down = objective()
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return errors


def brute_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """IoU from explicit pixel-coordinate sets."""
    p = {(int(r), int(c)) for r, c in zip(*np.nonzero(pred))}
    t = {(int(r), int(c)) for r, c in zip(*np.nonzero(gt))}
    union = p | t
    return 1.0 if not union else len(p & t) / len(union)


def landed_fraction(mask: np.ndarray, out: np.ndarray, params) -> float:
    """Share of in-frame building pixels whose forward-mapped coordinate has a
    building pixel of ``out`` within one pixel (Chebyshev distance)."""
    mapped = forward_map(np.argwhere(mask).astype(float), mask.shape, params)
    h, w = mask.shape
    inside = ((mapped[:, 0] > -0.5) & (mapped[:, 0] < h - 0.5)
              & (mapped[:, 1] > -0.5) & (mapped[:, 1] < w - 0.5))
    got = np.argwhere(out).astype(float)
    if not inside.any():
        return 1.0
    if len(got) == 0:
        return 0.0
    d = np.abs(mapped[inside][:, None, :] - got[None, :, :]).max(axis=2).min(axis=1)
    return float(np.mean(d <= 1.0))


def rect_mask(rng, shape=(48, 48), n=3) -> np.ndarray:
    mask = np.zeros(shape, bool)
    for _ in range(n):
        r, c = rng.integers(4, shape[0] - 16), rng.integers(4, shape[1] - 16)
        mask[r:r + rng.integers(3, 12), c:c + rng.integers(3, 12)] = True
    return mask


def pyramid_with_losses(losses, n=1, size=32):
    """Constant two-class maps whose cross-entropy against all-background labels is
    exactly ``losses[i]``: CE = log(1 + exp(z)) for logits (0, z)."""
    maps = []
    for k, loss in enumerate(losses):
        s = size >> (4 - k)
        m = torch.zeros(n, 2, s, s, dtype=torch.float64)
        m[:, 1] = math.log(math.expm1(loss))
        maps.append(m)
    return maps, torch.zeros(n, size, size, dtype=torch.long)
