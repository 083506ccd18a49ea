"""Experiment configuration: one YAML file per experiment.

Top-level sections are ``data``, ``bsm``, ``model``, ``train``, ``eval`` plus
a global ``seed``. Unknown keys are rejected; every missing key takes the
default of the corresponding dataclass. Relative paths resolve against the
directory holding the config file.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ._util import to_jsonable
from .augment import AugmentationConfig
from .bsm import BsmConfig
from .data import SyntheticSpec, StyleParams
from .model import SegModelConfig
from .stylemix import StyleMixConfig
from .train import TrainConfig

ENV_OUT = "BSMSEG_OUT"
ENV_WORKERS = "BSMSEG_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None  # existing manifest; takes precedence over synthesis
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    raw_dir: str | None = None  # scenes for `prepare`: <raw_dir>/images, <raw_dir>/masks
    tile_size: int = 512
    drop_background_only: bool = True
    train_ratio: float = 0.9
    n_train: int | None = None


@dataclass(frozen=True)
class EvalConfig:
    out_dir: str = "bsm_out"
    aggregation: str = "image"  # headline mIoU: "image" mean or "city" mean
    batch_size: int = 1
    split: str = "test"
    checkpoint: str | None = None  # defaults to <out_dir>/train/model.npz

    def __post_init__(self):
        if self.aggregation not in ("image", "city"):
            raise ValueError(f"aggregation must be 'image' or 'city', got {self.aggregation!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    bsm: BsmConfig = field(default_factory=BsmConfig)
    model: SegModelConfig = field(default_factory=SegModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    @property
    def out_dir(self) -> Path:
        return Path(self.eval.out_dir)

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None,
                       workers: int | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if out_dir is not None:
            cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, out_dir=str(out_dir)))
        if workers is not None:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, workers=workers))
        # the global seed drives training
        return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=cfg.seed))


# ---------------------------------------------------------------------------
# building dataclasses from plain data


def _key_lines(node, prefix: str = "") -> dict[str, int]:
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            lines[path] = k.start_mark.line + 1
            lines.update(_key_lines(v, path))
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            lines.update(_key_lines(v, f"{prefix}[{i}]"))
    return lines


class _Builder:
    def __init__(self, lines: dict[str, int] | None = None, source: str = "<config>"):
        self.lines = lines or {}
        self.source = source

    def fail(self, path: str, msg: str):
        line = self.lines.get(path)
        where = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{where}: {path or '<root>'}: {msg}")

    def value(self, tp, raw, path: str):
        origin = typing.get_origin(tp)
        args = typing.get_args(tp)
        if origin in (typing.Union, types.UnionType):
            if raw is None and type(None) in args:
                return None
            (inner,) = [a for a in args if a is not type(None)]
            return self.value(inner, raw, path)
        if dataclasses.is_dataclass(tp):
            return self.build(tp, raw, path)
        if origin is tuple:
            if not isinstance(raw, (list, tuple)):
                self.fail(path, f"expected a list, got {type(raw).__name__}")
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(self.value(args[0], v, f"{path}[{i}]") for i, v in enumerate(raw))
            if len(raw) != len(args):
                self.fail(path, f"expected {len(args)} items, got {len(raw)}")
            return tuple(self.value(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, raw)))
        if tp is bool:
            if not isinstance(raw, bool):
                self.fail(path, f"expected true/false, got {raw!r}")
            return raw
        if tp is int:
            if isinstance(raw, bool) or not isinstance(raw, int):
                self.fail(path, f"expected an integer, got {raw!r}")
            return raw
        if tp is float:
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                self.fail(path, f"expected a number, got {raw!r}")
            return float(raw)
        if tp is str:
            if not isinstance(raw, str):
                self.fail(path, f"expected a string, got {raw!r}")
            return raw
        self.fail(path, f"unsupported field type {tp}")

    def build(self, cls, raw, path: str = ""):
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            self.fail(path, f"expected a mapping, got {type(raw).__name__}")
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in names:
                self.fail(f"{path}.{key}" if path else str(key),
                          f"unknown key (allowed: {', '.join(sorted(names))})")
        kwargs = {k: self.value(hints[k], v, f"{path}.{k}" if path else k) for k, v in raw.items()}
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            self.fail(path, str(exc))


def config_from_dict(raw: dict, source: str = "<config>", lines=None) -> ExperimentConfig:
    return _Builder(lines, source).build(ExperimentConfig, raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return to_jsonable(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None or Path(p).is_absolute():
        return p
    return str((base / p).resolve())


def _check_paths(cfg: ExperimentConfig, source: str) -> ExperimentConfig:
    checks = [("data.manifest", cfg.data.manifest), ("data.raw_dir", cfg.data.raw_dir),
              ("bsm.style.weights_path", cfg.bsm.style.weights_path),
              ("model.pretrained_path", cfg.model.pretrained_path)]
    for name, p in checks:
        if p is not None and not Path(p).exists():
            raise ConfigError(f"{source}: {name}: path does not exist: {p}")
    return cfg


def parse_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Load and validate an experiment config (defaults only when ``path`` is None)."""
    if path is None and text is None:
        return ExperimentConfig()
    source = str(path) if path is not None else "<string>"
    if text is None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
    base = Path(path).resolve().parent if path is not None else Path.cwd()
    try:
        raw = yaml.safe_load(text)
        lines = _key_lines(yaml.compose(text)) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: malformed YAML: {exc}") from None
    cfg = config_from_dict(raw or {}, source, lines)

    data = dataclasses.replace(cfg.data, manifest=_resolve(base, cfg.data.manifest),
                               raw_dir=_resolve(base, cfg.data.raw_dir))
    style = dataclasses.replace(cfg.bsm.style, weights_path=_resolve(base, cfg.bsm.style.weights_path))
    model = dataclasses.replace(cfg.model, pretrained_path=_resolve(base, cfg.model.pretrained_path))
    ev = dataclasses.replace(cfg.eval, checkpoint=_resolve(base, cfg.eval.checkpoint))
    cfg = dataclasses.replace(cfg, data=data, model=model, eval=ev,
                              bsm=dataclasses.replace(cfg.bsm, style=style))
    return _check_paths(cfg, source)


def env_overrides() -> dict:
    out = {}
    if os.environ.get(ENV_OUT):
        out["out_dir"] = os.environ[ENV_OUT]
    if os.environ.get(ENV_WORKERS):
        try:
            out["workers"] = int(os.environ[ENV_WORKERS])
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS} must be an integer") from None
    return out


__all__ = [
    "AugmentationConfig", "BsmConfig", "ConfigError", "DataConfig", "EvalConfig",
    "ExperimentConfig", "SegModelConfig", "StyleMixConfig", "StyleParams", "SyntheticSpec",
    "TrainConfig", "config_from_dict", "config_to_dict", "dump_config", "env_overrides",
    "parse_config",
]
