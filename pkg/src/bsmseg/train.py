"""Training loop: BSM augmentation, deep-supervised cross-entropy, Adam + poly schedule."""

from __future__ import annotations

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ._util import stable_hash
from .bsm import AugmentationTrace, BsmConfig, bsm_apply
from .data import SampleBatch, Tile
from .model import SCALES, SegModel, save_checkpoint
from .stylemix import make_transform

log = logging.getLogger(__name__)

LOSS_WEIGHTS = (0.25, 0.25, 0.25, 0.25, 0.5)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay: float = 5e-5
    poly_power: float = 0.9
    batch_size: int = 16
    total_iterations: int | None = 200  # desk-scale budget; None forces an explicit value
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    loss_weights: tuple[float, ...] = LOSS_WEIGHTS
    workers: int = 1

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not self.poly_power > 0:
            raise ValueError(f"poly_power must be positive, got {self.poly_power}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.total_iterations is not None and self.total_iterations < 0:
            raise ValueError("total_iterations must be non-negative")
        if len(self.loss_weights) != len(SCALES):
            raise ValueError(f"need {len(SCALES)} loss weights, got {len(self.loss_weights)}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses and schedule


def pixel_ce_loss(scores: torch.Tensor, labels: torch.Tensor,
                  valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean per-pixel cross-entropy over valid pixels.

    ``scores`` is N x C x H x W (logits), ``labels`` N x H x W class indices.
    Returns 0 when no pixel is valid.
    """
    if scores.shape[0] != labels.shape[0] or scores.shape[2:] != labels.shape[1:]:
        raise ValueError(f"scores {tuple(scores.shape)} do not match labels {tuple(labels.shape)}")
    n_classes = scores.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    per_pixel = F.cross_entropy(scores, labels.long(), reduction="none")
    if valid is None:
        return per_pixel.mean()
    valid = valid.to(per_pixel.dtype)
    count = valid.sum()
    if count == 0:
        return per_pixel.sum() * 0.0
    return (per_pixel * valid).sum() / count


def combine_scale_losses(losses: Sequence, weights: Sequence[float] = LOSS_WEIGHTS):
    if len(losses) != len(weights):
        raise ValueError(f"{len(losses)} scale losses for {len(weights)} weights")
    total = 0.0
    for w, l in zip(weights, losses):
        total = total + w * l
    return total


def _downsample(t: torch.Tensor, factor: int) -> torch.Tensor:
    return t if factor == 1 else t[:, ::factor, ::factor]


def multiscale_loss(pyramid: Sequence[torch.Tensor], labels: torch.Tensor,
                    valid: torch.Tensor | None = None, weights: Sequence[float] = LOSS_WEIGHTS):
    """Weighted sum of per-scale losses against nearest-downsampled labels.

    Returns ``(total, per_scale)``.
    """
    if len(pyramid) != len(weights):
        raise ValueError(f"pyramid has {len(pyramid)} maps, expected {len(weights)}")
    h, w = labels.shape[1:]
    losses = []
    for scores in pyramid:
        sh, sw = scores.shape[2:]
        if h % sh or w % sw or h // sh != w // sw:
            raise ValueError(f"map {sh}x{sw} is not an integer fraction of labels {h}x{w}")
        f = h // sh
        losses.append(pixel_ce_loss(scores, _downsample(labels, f),
                                    None if valid is None else _downsample(valid, f)))
    return combine_scale_losses(losses, weights), losses


def poly_lr(base_lr: float, iteration: int, total_iterations: int, power: float = 0.9) -> float:
    if total_iterations <= 0:
        raise ValueError("total_iterations must be positive")
    if not 0 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    return base_lr * (1.0 - iteration / total_iterations) ** power


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    log: list[tuple[int, float, float]] = field(default_factory=list)
    checkpoint: Path | None = None
    data_order_hash: str = ""
    traces: list[AugmentationTrace] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [row[1] for row in self.log]


def _streams(seed: int, iteration: int):
    data = np.random.default_rng(np.random.SeedSequence([seed, 0, iteration]))
    aug = np.random.default_rng(np.random.SeedSequence([seed, 1, iteration]))
    return data, aug


def batch_indices(seed: int, iteration: int, n_tiles: int, batch_size: int) -> np.ndarray:
    rng, _ = _streams(seed, iteration)
    return rng.choice(n_tiles, size=batch_size, replace=batch_size > n_tiles)


def to_tensors(batch: SampleBatch, dtype=torch.float32):
    return (torch.from_numpy(np.ascontiguousarray(batch.images)).to(dtype),
            torch.from_numpy(batch.masks.astype(np.int64)),
            torch.from_numpy(np.ascontiguousarray(batch.valid)))


def _prefetch(make, n: int, workers: int) -> Iterator:
    """Yield ``make(i)`` for i in range(n) in order, computed ``workers`` ahead."""
    if workers <= 1:
        for i in range(n):
            yield make(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        nxt = 0
        while nxt < n and len(pending) < 2 * workers:
            pending.append(pool.submit(make, nxt))
            nxt += 1
        while pending:
            result = pending.popleft().result()
            if nxt < n:
                pending.append(pool.submit(make, nxt))
                nxt += 1
            yield result


def train(model: SegModel, tiles: Sequence[Tile], bsm_cfg: BsmConfig, cfg: TrainConfig,
          out_dir=None, trace: bool = False) -> TrainResult:
    """Train in place. Writes ``train_log.tsv``, checkpoints and (optionally)
    ``aug_trace.jsonl`` under ``out_dir`` when one is given."""
    if cfg.total_iterations is None:
        raise ValueError("train.total_iterations must be set")
    if not tiles:
        raise ValueError("the training split is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    full = SampleBatch.from_tiles(tiles)
    total = cfg.total_iterations
    transform = make_transform(bsm_cfg.style) if "SM" in bsm_cfg.enabled else None
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    result = TrainResult()
    order = []

    def make(it):
        idx = batch_indices(cfg.seed, it, len(full), cfg.batch_size)
        batch = SampleBatch(full.images[idx], full.masks[idx], full.valid[idx])
        _, aug_rng = _streams(cfg.seed, it)
        batch, tr = bsm_apply(batch, bsm_cfg, aug_rng, transform)
        tr.batch_index, tr.seed = it, cfg.seed
        return idx, batch, tr

    log_fh = open(out_dir / "train_log.tsv", "w") if out_dir is not None else None
    trace_fh = open(out_dir / "aug_trace.jsonl", "w") if (out_dir is not None and trace) else None
    model.train()
    try:
        for it, (idx, batch, tr) in enumerate(_prefetch(make, total, cfg.workers)):
            order.append(idx.tolist())
            if trace:
                result.traces.append(tr)
                if trace_fh:
                    trace_fh.write(tr.to_line() + "\n")
            lr = poly_lr(cfg.base_lr, it, total, cfg.poly_power)
            for group in optimizer.param_groups:
                group["lr"] = lr
            images, labels, valid = to_tensors(batch, next(model.parameters()).dtype)
            loss, _ = multiscale_loss(model.forward_train(images), labels, valid, cfg.loss_weights)
            value = float(loss.detach())
            if not math.isfinite(value):
                ckpt = None
                if out_dir is not None:
                    ckpt = out_dir / "last_good.npz"
                    save_checkpoint(model, ckpt, it)
                raise TrainingError(f"non-finite loss {value} at iteration {it}; "
                                    f"last good weights: {ckpt}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            result.log.append((it, value, lr))
            if log_fh:
                log_fh.write(f"{it}\t{value!r}\t{lr!r}\n")
            if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"checkpoint_{it + 1:06d}.npz", it + 1)
            if it % 50 == 0:
                log.debug("iter %d loss %.4f lr %.2e", it, value, lr)
    finally:
        if log_fh:
            log_fh.close()
        if trace_fh:
            trace_fh.close()

    result.data_order_hash = stable_hash(order)
    if out_dir is not None:
        result.checkpoint = out_dir / "model.npz"
        save_checkpoint(model, result.checkpoint, total, {"data_order_hash": result.data_order_hash})
    return result


def read_train_log(path) -> list[tuple[int, float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        it, loss, lr = line.split("\t")
        rows.append((int(it), float(loss), float(lr)))
    return rows
