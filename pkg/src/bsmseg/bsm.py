"""Batch style mixing: GA -> CA -> SM, each behind its own Bernoulli gate."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .augment import (AugmentationConfig, ColorParams, GeometricParams, apply_color,
                      apply_geometric, apply_geometric_params)
from .data import SampleBatch
from .stylemix import StyleMixConfig, make_transform, style_mix_batch

SUBMODULES = ("GA", "CA", "SM")


@dataclass(frozen=True)
class BsmConfig:
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    style: StyleMixConfig = field(default_factory=StyleMixConfig)
    p_ga: float = 0.5
    p_ca: float = 0.5
    p_sm: float = 0.5
    enabled: tuple[str, ...] = SUBMODULES

    def __post_init__(self):
        for name in ("p_ga", "p_ca", "p_sm"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name}={getattr(self, name)} is not a probability")
        unknown = set(self.enabled) - set(SUBMODULES)
        if unknown:
            raise ValueError(f"unknown submodules {sorted(unknown)}; choose from {SUBMODULES}")
        # canonical order regardless of how the set was written
        object.__setattr__(self, "enabled", tuple(s for s in SUBMODULES if s in self.enabled))

    def gate(self, name: str) -> float:
        return {"GA": self.p_ga, "CA": self.p_ca, "SM": self.p_sm}[name]

    def with_enabled(self, enabled) -> "BsmConfig":
        return BsmConfig(self.augment, self.style, self.p_ga, self.p_ca, self.p_sm, tuple(enabled))


@dataclass
class AugmentationTrace:
    """What one bsm_apply call drew: gate outcomes and per-sample parameters."""

    batch_index: int | None = None
    seed: int | None = None
    fired: dict[str, bool] = field(default_factory=dict)
    geometric: list[GeometricParams] | None = None
    color: list[ColorParams] | None = None
    permutation: list[int] | None = None

    def to_line(self) -> str:
        record = {
            "batch": self.batch_index,
            "seed": self.seed,
            "fired": self.fired,
            "GA": None if self.geometric is None else [asdict(p) for p in self.geometric],
            "CA": None if self.color is None else [asdict(p) for p in self.color],
            "SM": self.permutation,
        }
        return json.dumps(record, sort_keys=True)

    @classmethod
    def from_line(cls, line: str) -> "AugmentationTrace":
        r = json.loads(line)
        return cls(
            batch_index=r["batch"], seed=r["seed"], fired=r["fired"],
            geometric=None if r["GA"] is None else [GeometricParams(**p) for p in r["GA"]],
            color=None if r["CA"] is None else [ColorParams(**p) for p in r["CA"]],
            permutation=r["SM"],
        )


def replay_labels(masks: np.ndarray, trace: AugmentationTrace) -> np.ndarray:
    """Re-derive augmented labels from the original ones using only the recorded geometry."""
    if not trace.geometric:
        return masks.copy()
    dummy = SampleBatch(np.zeros((len(masks), 1) + masks.shape[1:], np.float32), masks)
    return apply_geometric_params(dummy, trace.geometric).masks


def bsm_apply(batch: SampleBatch, cfg: BsmConfig, rng: np.random.Generator,
              transform=None) -> tuple[SampleBatch, AugmentationTrace]:
    """Augment a training batch. Labels change only through GA's geometry.

    Each submodule gets its own child stream of ``rng``, so the draws of one
    submodule do not depend on whether the others are enabled.
    """
    if len(batch) == 0:
        raise ValueError("bsm_apply needs a non-empty batch")
    streams = dict(zip(SUBMODULES, rng.spawn(len(SUBMODULES))))
    trace = AugmentationTrace()
    out = batch
    for name in SUBMODULES:
        if name not in cfg.enabled:
            continue
        sub = streams[name]
        fired = bool(sub.random() < cfg.gate(name))
        trace.fired[name] = fired
        if not fired:
            continue
        if name == "GA":
            out, trace.geometric = apply_geometric(out, cfg.augment, sub)
        elif name == "CA":
            out, trace.color = apply_color(out, cfg.augment, sub)
        else:
            transform = transform or make_transform(cfg.style)
            out, perm = style_mix_batch(out, cfg.style, sub, transform)
            trace.permutation = perm.tolist()
    return out, trace
