"""Batch style mixing (GA -> CA -> SM) for building-extraction training, with a
desk-scale attention FCN, trainer, evaluator and CLI."""

from .augment import AugmentationConfig, apply_color, apply_geometric, scale_then_fit
from .bsm import AugmentationTrace, BsmConfig, bsm_apply
from .data import DatasetManifest, SampleBatch, SyntheticSpec, Tile, load_tile
from .evaluate import EvalReport, confusion_counts, iou, run_ablation
from .model import SegModel, SegModelConfig, build_model
from .stylemix import StyleMixConfig, adain, channel_stats, mix_interpolate, style_mix_batch
from .train import TrainConfig, multiscale_loss, pixel_ce_loss, poly_lr, train

__version__ = "0.1.0"
