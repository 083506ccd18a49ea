"""Tile IO, tiling, filtering, train/val splitting and a synthetic two-style dataset.

On-disk conventions:

* images are 3-channel 8-bit rasters (TIFF, PNG accepted as well);
* masks are single-channel 8-bit rasters where building = 255 and
  background = 0, nothing else;
* tile ids are ``<city>_<number>``;
* the manifest is a UTF-8 text file with one tab-separated record per line,
  ``id  image_path  mask_path  city  split``, paths relative to the manifest.
  Lines starting with ``#`` are header comments (``# seed=<int>``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

MASK_ON = 255
MASK_OFF = 0
SPLITS = ("train", "val", "test")
_TILE_ID = re.compile(r"^(?P<city>.+)_(?P<number>\d+)$")


class DataError(ValueError):
    """Raised on malformed rasters, manifests or dataset specs."""


def make_tile_id(city: str, number: int) -> str:
    return f"{city}_{number:05d}"


def parse_tile_id(tile_id: str) -> tuple[str, int]:
    m = _TILE_ID.match(tile_id)
    if m is None:
        raise DataError(f"tile id {tile_id!r} does not follow the '<city>_<number>' rule")
    return m.group("city"), int(m.group("number"))


@dataclass
class Tile:
    image: np.ndarray  # H x W x 3, uint8
    mask: np.ndarray  # H x W, bool
    city: str
    id: str
    resolution_m: float = float("nan")
    valid: np.ndarray | None = None  # H x W bool, False on padding; None = all valid

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(
                f"tile {self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ in size"
            )
        if self.valid is not None and self.valid.shape != self.mask.shape:
            raise DataError(f"tile {self.id}: valid-pixel map has shape {self.valid.shape}")

    @property
    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.mask.shape, dtype=bool)
        return self.valid


@dataclass
class SampleBatch:
    """N aligned image/mask pairs in network layout.

    ``images`` is N x C x H x W float32 on the 0-255 intensity scale, ``masks``
    and ``valid`` are N x H x W bool.
    """

    images: np.ndarray
    masks: np.ndarray
    valid: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)
    cities: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.masks.shape, dtype=bool)
        n, _, h, w = self.images.shape
        if self.masks.shape != (n, h, w) or self.valid.shape != (n, h, w):
            raise DataError(
                f"batch shapes disagree: images {self.images.shape}, masks {self.masks.shape}, "
                f"valid {self.valid.shape}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def replace(self, **changes) -> "SampleBatch":
        kw = dict(images=self.images, masks=self.masks, valid=self.valid,
                  ids=list(self.ids), cities=list(self.cities))
        kw.update(changes)
        return SampleBatch(**kw)

    @classmethod
    def from_tiles(cls, tiles: Sequence[Tile]) -> "SampleBatch":
        if not tiles:
            return cls(np.zeros((0, 3, 0, 0), np.float32), np.zeros((0, 0, 0), bool))
        images = np.stack([t.image for t in tiles]).transpose(0, 3, 1, 2).astype(np.float32)
        return cls(
            images=images,
            masks=np.stack([t.mask for t in tiles]),
            valid=np.stack([t.valid_mask for t in tiles]),
            ids=[t.id for t in tiles],
            cities=[t.city for t in tiles],
        )


# ---------------------------------------------------------------------------
# rasters


def decode_mask(raster: np.ndarray, source: str = "<array>") -> np.ndarray:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise DataError(f"{source}: mask must be single-channel, got shape {raster.shape}")
    bad = (raster != MASK_ON) & (raster != MASK_OFF)
    if bad.any():
        values = np.unique(raster[bad])[:8].tolist()
        raise DataError(
            f"{source}: mask has {int(bad.sum())} pixels outside {{0, 255}} (e.g. {values})"
        )
    return raster == MASK_ON


def encode_mask(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask, dtype=bool), MASK_ON, MASK_OFF).astype(np.uint8)


def _read_raster(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"raster not found: {path}")
    with Image.open(path) as im:
        return np.array(im)


def load_tile(image_path, mask_path, city: str | None = None, tile_id: str | None = None,
              resolution_m: float = float("nan")) -> Tile:
    image_path, mask_path = Path(image_path), Path(mask_path)
    image = _read_raster(image_path)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] < 3:
        raise DataError(f"{image_path}: expected a 3-channel image, got shape {image.shape}")
    image = np.ascontiguousarray(image[..., :3].astype(np.uint8))
    mask = decode_mask(_read_raster(mask_path), str(mask_path))
    if image.shape[:2] != mask.shape:
        raise DataError(
            f"{image_path} is {image.shape[1]}x{image.shape[0]} but {mask_path} is "
            f"{mask.shape[1]}x{mask.shape[0]}"
        )
    tile_id = tile_id or image_path.stem
    if city is None:
        city = parse_tile_id(tile_id)[0] if _TILE_ID.match(tile_id) else ""
    return Tile(image=image, mask=mask, city=city, id=tile_id, resolution_m=resolution_m)


def save_tile(tile: Tile, image_path, mask_path) -> None:
    Path(image_path).parent.mkdir(parents=True, exist_ok=True)
    Path(mask_path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tile.image).save(image_path)
    Image.fromarray(encode_mask(tile.mask)).save(mask_path)


# ---------------------------------------------------------------------------
# tiling and filtering


def crop_to_tiles(image: np.ndarray, mask: np.ndarray, tile_size: int = 512, city: str = "scene",
                  first_number: int = 0, pad: bool = True) -> list[Tile]:
    """Cut an image/mask pair into a row-major grid of non-overlapping tiles.

    Edge remainders are padded with zeros (image) and False (mask) and the
    padded pixels are marked invalid so evaluation can skip them. With
    ``pad=False`` the remainders are dropped instead.
    """
    if image.shape[:2] != mask.shape:
        raise DataError(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    h, w = mask.shape
    if h == 0 or w == 0:
        raise DataError("cannot tile a zero-area scene")
    if tile_size <= 0:
        raise DataError(f"tile_size must be positive, got {tile_size}")
    if not pad and (h < tile_size or w < tile_size):
        raise DataError(f"scene {h}x{w} is smaller than tile size {tile_size} and padding is off")

    if pad:
        rows, cols = -(-h // tile_size), -(-w // tile_size)
    else:
        rows, cols = h // tile_size, w // tile_size
    ph, pw = rows * tile_size, cols * tile_size
    img = np.zeros((ph, pw) + image.shape[2:], dtype=image.dtype)
    msk = np.zeros((ph, pw), dtype=bool)
    valid = np.zeros((ph, pw), dtype=bool)
    hh, ww = min(h, ph), min(w, pw)
    img[:hh, :ww] = image[:hh, :ww]
    msk[:hh, :ww] = mask[:hh, :ww]
    valid[:hh, :ww] = True

    tiles = []
    number = first_number
    for r in range(rows):
        for c in range(cols):
            sl = np.s_[r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size]
            v = valid[sl]
            tiles.append(Tile(
                image=img[sl].copy(), mask=msk[sl].copy(), city=city,
                id=make_tile_id(city, number), valid=None if v.all() else v.copy(),
            ))
            number += 1
    return tiles


def filter_background_only(tiles: Iterable[Tile]) -> list[Tile]:
    return [t for t in tiles if t.mask.any()]


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    city: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"entry {self.id}: unknown split {self.split!r}")


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int | None = None
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise DataError(f"duplicate tile id {e.id!r} in manifest")
            seen.add(e.id)

    def __len__(self) -> int:
        return len(self.entries)

    def select(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def counts(self) -> dict[str, int]:
        return {s: sum(e.split == s for e in self.entries) for s in SPLITS}

    def check_files(self) -> None:
        for e in self.entries:
            for p in (e.image_path, e.mask_path):
                if not (self.root / p).is_file():
                    raise DataError(f"entry {e.id}: missing file {self.root / p}")

    def load(self, entry: ManifestEntry) -> Tile:
        return load_tile(self.root / entry.image_path, self.root / entry.mask_path,
                         city=entry.city, tile_id=entry.id)

    def load_split(self, split: str) -> list[Tile]:
        return [self.load(e) for e in self.select(split)]

    def write(self, path) -> None:
        path = Path(path)
        lines = []
        if self.seed is not None:
            lines.append(f"# seed={self.seed}")
        for e in self.entries:
            fields = (e.id, e.image_path, e.mask_path, e.city, e.split)
            if any("\t" in f or "\n" in f for f in fields):
                raise DataError(f"entry {e.id}: fields may not contain tabs or newlines")
            lines.append("\t".join(fields))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        seed = None
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                m = re.match(r"#\s*seed=(-?\d+)\s*$", line)
                if m:
                    seed = int(m.group(1))
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            try:
                entries.append(ManifestEntry(*parts))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
        return cls(entries=entries, seed=seed, root=path.parent)


def split_trainval(manifest: DatasetManifest, ratio: float = 0.9, seed: int = 0,
                   n_train: int | None = None) -> DatasetManifest:
    """Randomly relabel the non-test entries as train or val.

    ``n_train`` takes precedence over ``ratio`` when given (published splits
    do not always equal a rounded ratio). Test entries are left untouched.
    """
    if not 0.0 < ratio <= 1.0:
        raise DataError(f"train ratio must be in (0, 1], got {ratio}")
    pool = [i for i, e in enumerate(manifest.entries) if e.split != "test"]
    n = len(pool)
    if n_train is None:
        n_train = int(round(ratio * n))
    if not 0 <= n_train <= n:
        raise DataError(f"requested {n_train} training entries but only {n} are available")

    order = np.random.default_rng(seed).permutation(n)
    train_idx = {pool[k] for k in order[:n_train]}
    entries = []
    for i, e in enumerate(manifest.entries):
        if e.split != "test":
            e = ManifestEntry(e.id, e.image_path, e.mask_path, e.city,
                              "train" if i in train_idx else "val")
        entries.append(e)
    return DatasetManifest(entries=entries, seed=seed, root=manifest.root)


# ---------------------------------------------------------------------------
# synthetic two-style data


@dataclass(frozen=True)
class StyleParams:
    """Per-channel affine intensity style plus additive texture noise.

    ``jitter`` perturbs bias (by up to ``jitter * 100`` levels) and gain (by a
    factor up to ``1 +/- jitter``) independently per tile and channel, standing
    in for acquisition differences inside one domain.
    """

    name: str
    bias: tuple[float, float, float]
    gain: tuple[float, float, float]
    noise: float
    jitter: float = 0.0
    scale: float = 1.0  # object size multiplier, i.e. relative ground resolution

    def __post_init__(self):
        if len(self.bias) != 3 or len(self.gain) != 3:
            raise DataError(f"style {self.name}: bias and gain need three channels")
        if any(g <= 0 for g in self.gain):
            raise DataError(f"style {self.name}: gains must be positive")
        if self.noise < 0:
            raise DataError(f"style {self.name}: noise must be non-negative")
        if self.scale <= 0:
            raise DataError(f"style {self.name}: scale must be positive")
        if not 0.0 <= self.jitter < 1.0:
            raise DataError(f"style {self.name}: jitter must be in [0, 1)")


NOMINAL_RESOLUTION_M = 0.3
STYLE_A = StyleParams("styleA", bias=(0.0, 0.0, 0.0), gain=(1.0, 1.0, 1.0), noise=4.0, jitter=0.25)
# darker, blue-cast target imaged at coarser ground resolution
STYLE_B = StyleParams("styleB", bias=(-10.0, 0.0, 60.0), gain=(0.45, 0.55, 0.9), noise=6.0, scale=1.5)


@dataclass(frozen=True)
class SyntheticSpec:
    n_tiles: int = 64  # per style domain
    tile_size: int = 64
    buildings: tuple[int, int] = (2, 6)  # inclusive count range per tile
    building_size: tuple[int, int] = (6, 18)  # inclusive side-length range, pixels
    roads: tuple[int, int] = (0, 2)
    styles: tuple[StyleParams, StyleParams] = (STYLE_A, STYLE_B)
    train_ratio: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("buildings", "building_size", "roads"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise DataError(f"synthetic spec: empty or negative range {name}={lo, hi}")
        if self.building_size[0] < 1 and self.buildings[1] > 0:
            raise DataError("synthetic spec: building sides must be at least one pixel")
        if self.n_tiles < 1 or self.tile_size < 1:
            raise DataError("synthetic spec: n_tiles and tile_size must be positive")
        if self.building_size[1] > self.tile_size:
            raise DataError("synthetic spec: buildings larger than the tile")
        a, b = self.styles
        if (a.bias, a.gain, a.noise, a.jitter, a.scale) == (b.bias, b.gain, b.noise, b.jitter, b.scale) or a.name == b.name:
            raise DataError("synthetic spec: the two styles must differ")
        if not 0.0 < self.train_ratio <= 1.0:
            raise DataError(f"synthetic spec: train_ratio {self.train_ratio} outside (0, 1]")


def _render_content(rng: np.random.Generator, spec: SyntheticSpec,
                    scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Style-free scene in [0, 1]: textured ground, roads and rectangular roofs.

    ``scale`` multiplies every object size (finer ground sampling distance).
    """
    s = spec.tile_size
    ground = np.array([0.36, 0.42, 0.30]) + rng.uniform(-0.04, 0.04, 3)
    block = max(int(round(8 * scale)), 1)
    coarse = rng.normal(0.0, 0.05, (s // block + 2, s // block + 2))
    field_ = np.kron(coarse, np.ones((block, block)))[:s, :s]
    content = ground[None, None, :] + field_[..., None]
    mask = np.zeros((s, s), dtype=bool)

    for _ in range(rng.integers(spec.roads[0], spec.roads[1] + 1)):
        width = min(max(int(round(rng.integers(2, 5) * scale)), 1), s)
        pos = int(rng.integers(0, s - width + 1))
        tone = np.array([0.52, 0.52, 0.50]) + rng.uniform(-0.03, 0.03)
        if rng.random() < 0.5:
            content[pos:pos + width, :] = tone
        else:
            content[:, pos:pos + width] = tone

    lo, hi = spec.building_size
    sw = max(int(round(2 * scale)), 1)
    for _ in range(rng.integers(spec.buildings[0], spec.buildings[1] + 1)):
        bh, bw = (min(max(int(round(v * scale)), 1), s) for v in rng.integers(lo, hi + 1, 2))
        y, x = int(rng.integers(0, s - bh + 1)), int(rng.integers(0, s - bw + 1))
        roof = np.array([0.72, 0.62, 0.58]) + rng.uniform(-0.08, 0.08, 3)
        content[y:y + bh, x:x + bw] = roof
        mask[y:y + bh, x:x + bw] = True
        # cast shadow below/right of the roof, never over another roof
        shadow = np.zeros_like(mask)
        shadow[y + bh:y + bh + sw, x:x + bw + sw] = True
        shadow[y:y + bh + sw, x + bw:x + bw + sw] = True
        shadow &= ~mask
        content[shadow] *= 0.55
    return np.clip(content, 0.0, 1.0), mask


def apply_style(content: np.ndarray, style: StyleParams, rng: np.random.Generator) -> np.ndarray:
    gain, bias = np.asarray(style.gain, dtype=np.float64), np.asarray(style.bias, dtype=np.float64)
    if style.jitter > 0:
        gain = gain * (1.0 + rng.uniform(-style.jitter, style.jitter, 3))
        bias = bias + 100.0 * rng.uniform(-style.jitter, style.jitter, 3)
    out = content * 255.0 * gain + bias
    if style.noise > 0:
        out = out + rng.normal(0.0, style.noise, content.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def generate_synthetic_tiles(spec: SyntheticSpec) -> list[Tile]:
    """Render ``n_tiles`` per style; the style name is the tile's city tag."""
    tiles = []
    root = np.random.SeedSequence(spec.seed)
    for style, ss in zip(spec.styles, root.spawn(len(spec.styles))):
        for k, tile_ss in enumerate(ss.spawn(spec.n_tiles)):
            content_rng, noise_rng = (np.random.default_rng(c) for c in tile_ss.spawn(2))
            content, mask = _render_content(content_rng, spec, style.scale)
            tiles.append(Tile(image=apply_style(content, style, noise_rng), mask=mask,
                              city=style.name, id=make_tile_id(style.name, k),
                              resolution_m=NOMINAL_RESOLUTION_M / style.scale))
    return tiles


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write the synthetic tiles as PNG plus ``manifest.tsv`` under ``out_dir``.

    The first style is the source domain (split into train/val), the second
    is held out entirely as the test split.
    """
    out_dir = Path(out_dir)
    source, target = spec.styles
    entries = []
    for tile in generate_synthetic_tiles(spec):
        img_rel = f"images/{tile.id}.png"
        msk_rel = f"masks/{tile.id}.png"
        save_tile(tile, out_dir / img_rel, out_dir / msk_rel)
        split = "test" if tile.city == target.name else "train"
        entries.append(ManifestEntry(tile.id, img_rel, msk_rel, tile.city, split))
    manifest = DatasetManifest(entries=entries, seed=spec.seed, root=out_dir)
    manifest = split_trainval(manifest, ratio=spec.train_ratio, seed=spec.seed)
    manifest.write(out_dir / "manifest.tsv")
    return manifest
