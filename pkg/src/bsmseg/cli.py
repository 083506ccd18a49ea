"""Command-line entry point.

    bsmseg <command> [--config exp.yaml] [--seed N] [--out DIR] [--workers N] [--trace]

Commands: prepare, synth, train, eval, ablate, stylemix-preview, report.
Each run writes ``config.frozen.yaml`` (the effective config) into its
output directory; ``BSMSEG_OUT`` / ``BSMSEG_WORKERS`` override the output
directory and worker count.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config, env_overrides, parse_config
from .data import (DataError, DatasetManifest, ManifestEntry, SampleBatch, crop_to_tiles,
                   filter_background_only, generate_synthetic_dataset, load_tile, save_tile,
                   split_trainval)
from .evaluate import emit_report, evaluate_model, load_report, run_ablation
from .model import build_model, load_checkpoint
from .stylemix import style_mix_batch
from .train import TrainingError, batch_indices, train

log = logging.getLogger("bsmseg")

COMMANDS = ("prepare", "synth", "train", "eval", "ablate", "stylemix-preview", "report")
IMAGE_EXTS = (".tif", ".tiff", ".png")


def _freeze(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.frozen.yaml").write_text(dump_config(cfg))


def _data_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "data"


def _manifest(cfg: ExperimentConfig) -> DatasetManifest:
    path = Path(cfg.data.manifest) if cfg.data.manifest else _data_dir(cfg) / "manifest.tsv"
    if not path.is_file():
        raise DataError(f"no manifest at {path}; run `synth` or `prepare` first, or set data.manifest")
    manifest = DatasetManifest.read(path)
    manifest.check_files()
    return manifest


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    spec = cfg.data.synthetic
    manifest = generate_synthetic_dataset(spec, _data_dir(cfg))
    _freeze(cfg, _data_dir(cfg))
    log.info("wrote %d synthetic tiles (%s) to %s", len(manifest), manifest.counts(), _data_dir(cfg))
    return 0


def cmd_prepare(cfg: ExperimentConfig, args) -> int:
    """Tile full scenes from ``data.raw_dir``/{images,masks} into the on-disk tile format."""
    if not cfg.data.raw_dir:
        raise ConfigError("prepare needs data.raw_dir")
    raw = Path(cfg.data.raw_dir)
    out = _data_dir(cfg)
    entries = []
    next_number: dict[str, int] = {}
    for img_path in sorted(p for p in (raw / "images").iterdir() if p.suffix.lower() in IMAGE_EXTS):
        mask_path = next((raw / "masks" / (img_path.stem + ext) for ext in IMAGE_EXTS
                          if (raw / "masks" / (img_path.stem + ext)).is_file()), None)
        if mask_path is None:
            raise DataError(f"no mask for scene {img_path.name}")
        # scene "US_Kitsap_3.tif" belongs to city "US_Kitsap"
        city = re.sub(r"_\d+$", "", img_path.stem)
        scene = load_tile(img_path, mask_path, city=city, tile_id=img_path.stem)
        tiles = crop_to_tiles(scene.image, scene.mask, cfg.data.tile_size, city,
                              next_number.get(city, 0))
        next_number[city] = next_number.get(city, 0) + len(tiles)
        if cfg.data.drop_background_only:
            tiles = filter_background_only(tiles)
        for t in tiles:
            rel_img, rel_mask = f"images/{t.id}.tif", f"masks/{t.id}.tif"
            save_tile(t, out / rel_img, out / rel_mask)
            entries.append(ManifestEntry(t.id, rel_img, rel_mask, t.city, "train"))
    manifest = split_trainval(DatasetManifest(entries, root=out), cfg.data.train_ratio,
                              cfg.seed, cfg.data.n_train)
    manifest.write(out / "manifest.tsv")
    _freeze(cfg, out)
    log.info("prepared %d tiles: %s", len(manifest), manifest.counts())
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    manifest = _manifest(cfg)
    out = cfg.out_dir / "train"
    _freeze(cfg, out)
    model = build_model(cfg.model, cfg.seed)
    result = train(model, manifest.load_split("train"), cfg.bsm, cfg.train, out, trace=args.trace)
    log.info("trained %d iterations, final loss %.4f, checkpoint %s",
             len(result.log), result.log[-1][1] if result.log else float("nan"), result.checkpoint)
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    manifest = _manifest(cfg)
    ckpt = Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else cfg.out_dir / "train" / "model.npz"
    model, meta = load_checkpoint(ckpt)
    tiles = manifest.load_split(cfg.eval.split)
    if not tiles:
        raise DataError(f"split {cfg.eval.split!r} is empty")
    report = evaluate_model(model, tiles, cfg.eval.batch_size, meta.get("config_hash", ""))
    out = cfg.out_dir / "eval"
    _freeze(cfg, out)
    emit_report(report, out)
    headline = report.miou if cfg.eval.aggregation == "image" else report.miou_city_mean
    print(f"mIoU {headline:.2f}  " + "  ".join(f"{c} {v:.2f}" for c, v in report.city_iou.items()))
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    manifest = _manifest(cfg)
    out = cfg.out_dir / "ablate"
    _freeze(cfg, out)
    table = run_ablation(manifest.load_split("train"), manifest.load_split(cfg.eval.split), cfg.bsm,
                         cfg.model, cfg.train, eval_batch_size=cfg.eval.batch_size, out_dir=out)
    emit_report(table, out, "ablation")
    print((out / "ablation.tsv").read_text(), end="")
    return 1 if any(r.error for r in table.rows) else 0


def cmd_preview(cfg: ExperimentConfig, args) -> int:
    """Save a before/after grid of one seeded batch passed through style mixing."""
    from PIL import Image

    manifest = _manifest(cfg)
    tiles = manifest.load_split("train")
    n = min(cfg.train.batch_size, len(tiles), 8)
    idx = batch_indices(cfg.seed, 0, len(tiles), n)
    batch = SampleBatch.from_tiles([tiles[i] for i in idx])
    mixed, perm = style_mix_batch(batch, cfg.bsm.style, np.random.default_rng(cfg.seed))
    rows = [np.concatenate(list(b.images.transpose(0, 2, 3, 1)), axis=1) for b in (batch, mixed)]
    grid = np.clip(np.concatenate(rows, axis=0), 0, 255).astype(np.uint8)
    out = cfg.out_dir / "preview"
    _freeze(cfg, out)
    Image.fromarray(grid).save(out / "stylemix_preview.png")
    (out / "permutation.txt").write_text(" ".join(map(str, perm.tolist())) + "\n")
    print(out / "stylemix_preview.png")
    return 0


def cmd_report(cfg: ExperimentConfig, args) -> int:
    candidates = [cfg.out_dir / "eval" / "report.json", cfg.out_dir / "ablate" / "ablation.json"]
    src = Path(args.input) if args.input else next((p for p in candidates if p.is_file()), None)
    if src is None or not src.is_file():
        raise DataError("no report found; pass --input or run `eval`/`ablate` first")
    obj = load_report(src)
    paths = emit_report(obj, cfg.out_dir / "report", src.stem)
    print(paths["tsv"].read_text(), end="")
    return 0


HANDLERS = {
    "prepare": cmd_prepare, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "stylemix-preview": cmd_preview, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsmseg", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", help="one of: " + ", ".join(COMMANDS))
    parser.add_argument("--config", type=Path, help="experiment YAML (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides eval.out_dir)")
    parser.add_argument("--workers", type=int, help="data-preparation worker threads")
    parser.add_argument("--trace", action="store_true", help="write the augmentation trace")
    parser.add_argument("--input", help="report: structured report file to re-render")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def dispatch(command: str, cfg: ExperimentConfig, args=None) -> int:
    if command not in HANDLERS:
        raise KeyError(command)
    args = args or build_parser().parse_args([command])
    return HANDLERS[command](cfg, args)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command not in HANDLERS:
        parser.print_usage(sys.stderr)
        print(f"bsmseg: unknown command {args.command!r}; choose from {', '.join(COMMANDS)}",
              file=sys.stderr)
        return 2
    try:
        cfg = parse_config(args.config)
        env = env_overrides()
        cfg = cfg.with_overrides(seed=args.seed, out_dir=args.out or env.get("out_dir"),
                                 workers=args.workers or env.get("workers"))
        return dispatch(args.command, cfg, args)
    except (ConfigError, DataError, TrainingError, FileNotFoundError, ValueError) as exc:
        print(f"bsmseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
