"""IoU/mIoU scoring, per-city reports, the submodule ablation and report output.

Conventions: IoU is 1.0 when neither prediction nor ground truth contains a
building pixel. mIoU is the mean of per-image IoU over all images; the mean
of per-city IoU is reported alongside it. Per-city IoU pools the confusion
counts of all images of that city. Scores are stored as percentages.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ._util import stable_hash, to_jsonable
from .bsm import BsmConfig
from .data import SampleBatch, Tile
from .model import SegModel, SegModelConfig, build_model, predict_mask
from .train import TrainConfig, train

log = logging.getLogger(__name__)

ABLATION_ROWS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("Baseline", ()),
    ("GA", ("GA",)),
    ("CA", ("CA",)),
    ("SM", ("SM",)),
    ("GA + CA", ("GA", "CA")),
    ("GA + SM", ("GA", "SM")),
    ("CA + SM", ("CA", "SM")),
    ("GA + CA + SM (BSM)", ("GA", "CA", "SM")),
)
REPORT_FORMAT = "bsmseg-report/1"
ABLATION_FORMAT = "bsmseg-ablation/1"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> ConfusionCounts:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    elif valid.shape != pred.shape:
        raise ValueError(f"valid map {valid.shape} does not match {pred.shape}")
    p, g = pred[valid], gt[valid]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def iou(counts: ConfusionCounts) -> float:
    union = counts.tp + counts.fp + counts.fn
    return 1.0 if union == 0 else counts.tp / union


@dataclass
class ImageScore:
    id: str
    city: str
    counts: ConfusionCounts
    iou: float  # fraction


@dataclass
class EvalReport:
    miou: float  # percent, mean of per-image IoU
    miou_city_mean: float  # percent, mean of per-city IoU
    city_iou: dict[str, float]  # percent
    city_counts: dict[str, ConfusionCounts]
    images: list[ImageScore]
    config_hash: str = ""
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "aggregation": "miou = mean of per-image IoU; miou_city_mean = mean of city IoU; "
                           "city IoU from pooled counts; empty-vs-empty IoU = 1",
            "miou": self.miou,
            "miou_city_mean": self.miou_city_mean,
            "city_iou": dict(self.city_iou),
            "city_counts": {c: asdict(v) for c, v in self.city_counts.items()},
            "images": [{"id": s.id, "city": s.city, "counts": asdict(s.counts), "iou": s.iou}
                       for s in self.images],
            "config_hash": self.config_hash,
            "seconds": self.seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError(f"not an evaluation report: format {d.get('format')!r}")
        return cls(
            miou=d["miou"], miou_city_mean=d["miou_city_mean"], city_iou=dict(d["city_iou"]),
            city_counts={c: ConfusionCounts(**v) for c, v in d["city_counts"].items()},
            images=[ImageScore(s["id"], s["city"], ConfusionCounts(**s["counts"]), s["iou"])
                    for s in d["images"]],
            config_hash=d["config_hash"], seconds=d["seconds"],
        )


def aggregate(scores: Sequence[ImageScore], config_hash: str = "", seconds: float = 0.0) -> EvalReport:
    if not scores:
        raise ValueError("cannot aggregate an empty set of images")
    pooled: dict[str, ConfusionCounts] = {}
    for s in scores:
        pooled[s.city] = pooled.get(s.city, ConfusionCounts()) + s.counts
    city_iou = {c: 100.0 * iou(v) for c, v in pooled.items()}
    return EvalReport(
        miou=100.0 * float(np.mean([s.iou for s in scores])),
        miou_city_mean=float(np.mean(list(city_iou.values()))),
        city_iou=city_iou,
        city_counts=pooled,
        images=list(scores),
        config_hash=config_hash,
        seconds=seconds,
    )


def score_masks(preds: np.ndarray, batch: SampleBatch) -> list[ImageScore]:
    out = []
    for i in range(len(batch)):
        counts = confusion_counts(preds[i], batch.masks[i], batch.valid[i])
        out.append(ImageScore(batch.ids[i] if batch.ids else str(i),
                              batch.cities[i] if batch.cities else "", counts, iou(counts)))
    return out


def predict_tiles(model: SegModel, tiles: Sequence[Tile], batch_size: int = 1) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    with torch.no_grad():
        for start in range(0, len(tiles), batch_size):
            chunk = SampleBatch.from_tiles(tiles[start:start + batch_size])
            preds.append(predict_mask(model.forward_infer(torch.from_numpy(chunk.images).to(dtype))))
    return np.concatenate(preds) if preds else np.zeros((0, 0, 0), bool)


def evaluate_model(model: SegModel, tiles: Sequence[Tile], batch_size: int = 1,
                   config_hash: str = "") -> EvalReport:
    start = time.perf_counter()
    preds = predict_tiles(model, tiles, batch_size)
    scores = score_masks(preds, SampleBatch.from_tiles(tiles))
    return aggregate(scores, config_hash, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    name: str
    enabled: tuple[str, ...]
    miou: float | None = None
    miou_city_mean: float | None = None
    city_iou: dict[str, float] = field(default_factory=dict)
    train_seconds: float = 0.0
    run_hash: str = ""  # seeds, model/train config, iteration budget
    data_order_hash: str = ""
    error: str | None = None


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)
    seed: int | None = None

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def cities(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            for c in r.city_iou:
                if c not in seen:
                    seen.append(c)
        return seen

    def to_dict(self) -> dict:
        return {"format": ABLATION_FORMAT, "seed": self.seed,
                "rows": [to_jsonable(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationTable":
        if d.get("format") != ABLATION_FORMAT:
            raise ValueError(f"not an ablation table: format {d.get('format')!r}")
        rows = [AblationRow(**dict(r, enabled=tuple(r["enabled"]))) for r in d["rows"]]
        return cls(rows=rows, seed=d["seed"])


def run_ablation(train_tiles: Sequence[Tile], test_tiles: Sequence[Tile], bsm_cfg: BsmConfig,
                 model_cfg: SegModelConfig, train_cfg: TrainConfig,
                 rows=ABLATION_ROWS, eval_batch_size: int = 1, out_dir=None) -> AblationTable:
    """Train and score one model per submodule combination under identical seeds.

    A failing row is recorded with its error and the remaining rows still run.
    """
    table = AblationTable(seed=train_cfg.seed)
    run_hash = stable_hash({"model": model_cfg, "train": train_cfg,
                            "train_ids": [t.id for t in train_tiles]})
    for name, enabled in rows:
        row = AblationRow(name=name, enabled=tuple(enabled), run_hash=run_hash)
        row_dir = None
        if out_dir is not None:
            row_dir = Path(out_dir) / name.split(" (")[0].replace(" + ", "+").replace(" ", "_")
        try:
            model = build_model(model_cfg, train_cfg.seed)
            start = time.perf_counter()
            result = train(model, train_tiles, bsm_cfg.with_enabled(enabled), train_cfg, row_dir)
            row.train_seconds = time.perf_counter() - start
            row.data_order_hash = result.data_order_hash
            report = evaluate_model(model, test_tiles, eval_batch_size)
            row.miou, row.miou_city_mean = report.miou, report.miou_city_mean
            row.city_iou = report.city_iou
            log.info("ablation %-20s mIoU %.2f (%.1fs)", name, row.miou, row.train_seconds)
        except Exception as exc:  # one failed row must not sink the table
            row.error = f"{type(exc).__name__}: {exc}"
            log.error("ablation row %s failed: %s", name, row.error)
        table.rows.append(row)
    return table


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def format_report(report: EvalReport) -> str:
    cities = list(report.city_iou)
    head = ["mIoU (%)", "city-mean mIoU (%)"] + [f"{c} IoU (%)" for c in cities]
    vals = [_fmt(report.miou), _fmt(report.miou_city_mean)] + [_fmt(report.city_iou[c]) for c in cities]
    return "\t".join(head) + "\n" + "\t".join(vals) + "\n"


def format_ablation(table: AblationTable) -> str:
    cities = table.cities
    head = ["Submodule", "mIoU (%)"] + [f"{c} IoU (%)" for c in cities] + ["Training time (s)"]
    lines = ["\t".join(head)]
    for r in table.rows:
        cells = [r.name, _fmt(r.miou)] + [_fmt(r.city_iou.get(c)) for c in cities]
        cells.append("failed: " + r.error if r.error else f"{r.train_seconds:.1f}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def _bar_chart(labels: list[str], series: dict[str, list[float]], path: Path, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 1.2 * max(len(labels), 1) * max(len(series), 1) ** 0.5), 3.5))
    width = 0.8 / max(len(series), 1)
    x = np.arange(len(labels))
    for k, (name, vals) in enumerate(series.items()):
        ax.bar(x + k * width, vals, width, label=name)
    ax.set_xticks(x + width * (len(series) - 1) / 2)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    if 1 < len(series) <= 10:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_report(obj: EvalReport | AblationTable, out_dir, stem: str = "report") -> dict[str, Path]:
    """Write ``<stem>.json`` (structured), ``<stem>.tsv`` (table) and ``<stem>.png`` (per-city IoU)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {k: out_dir / f"{stem}.{k}" for k in ("json", "tsv", "png")}
    paths["json"].write_text(json.dumps(obj.to_dict(), indent=2, sort_keys=True) + "\n")
    if isinstance(obj, EvalReport):
        paths["tsv"].write_text(format_report(obj))
        _bar_chart(list(obj.city_iou), {"IoU": list(obj.city_iou.values())}, paths["png"], "Per-city IoU")
    else:
        paths["tsv"].write_text(format_ablation(obj))
        series = {r.name: [r.city_iou.get(c, 0.0) for c in obj.cities] for r in obj.rows if not r.error}
        _bar_chart(obj.cities, series, paths["png"], "Per-city IoU by submodule set")
    return paths


def load_report(path) -> EvalReport | AblationTable:
    d = json.loads(Path(path).read_text())
    if d.get("format") == ABLATION_FORMAT:
        return AblationTable.from_dict(d)
    return EvalReport.from_dict(d)
