"""Seeded glyph datasets and portable-pixmap I/O.

Each glyph class pairs a coarse 4x4-cell silhouette with a fine texture
painted inside the inked cells.  Every texture covers exactly half of each
4x4 pixel block, so once the canvas is box-downsampled by 4 (or more) the
texture averages away and only the silhouette survives.  With
``fine_variants`` textures per silhouette the peripheral view can at best
tell ``num_classes / fine_variants`` groups apart; the rest needs a
full-resolution look.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GLYPH_CELLS = 4
ALPHABET_SEED = 20_240_601

# fine textures inside one 4x4 block; each has exactly 8 of 16 pixels on
_TEXTURES = [
    np.array([[1, 1, 1, 1], [0, 0, 0, 0], [1, 1, 1, 1], [0, 0, 0, 0]]),  # horizontal lines
    np.array([[1, 0, 1, 0], [1, 0, 1, 0], [1, 0, 1, 0], [1, 0, 1, 0]]),  # vertical lines
    np.array([[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]]),  # checker
    np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]),  # coarse checker
    np.array([[1, 1, 1, 1], [1, 1, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0]]),  # top half
    np.array([[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 0, 0]]),  # left half
]


@dataclass
class GlyphDatasetConfig:
    canvas: int = 256
    glyph: int = 16
    num_classes: int = 10
    fine_variants: int = 2
    train_per_class: int = 50
    test_per_class: int = 20
    val_per_class: int = 0
    clutter_density: float = 0.1
    # strokes draw intensities from [contrast / 4, contrast]
    clutter_contrast: float = 0.5
    # i.i.d. background speckle in [0, background_noise]
    background_noise: float = 0.0
    placement: str = "uniform"
    align: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.glyph % GLYPH_CELLS or self.glyph < GLYPH_CELLS:
            raise ValueError(f"glyph side must be a multiple of {GLYPH_CELLS}")
        if not self.glyph * 4 <= self.canvas:
            raise ValueError("glyph must be small against the canvas")
        if self.num_classes % self.fine_variants:
            raise ValueError("num_classes must be a multiple of fine_variants")
        if not 1 <= self.fine_variants <= len(_TEXTURES):
            raise ValueError(f"fine_variants must be in [1, {len(_TEXTURES)}]")
        if self.placement not in ("uniform", "center"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.clutter_density < 0:
            raise ValueError("clutter density must be non-negative")
        if not 0 <= self.background_noise <= 1:
            raise ValueError("background noise must lie in [0, 1]")
        if not 0 <= self.clutter_contrast <= 1:
            raise ValueError("clutter contrast must lie in [0, 1]")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) uint8
    labels: np.ndarray  # (N,) int64
    positions: np.ndarray | None = None  # glyph top-left (row, col), when known

    def __len__(self):
        return len(self.labels)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.images[idx].astype(np.float32) / 255.0, self.labels[idx]

    def subset(self, idx) -> "Dataset":
        pos = None if self.positions is None else self.positions[idx]
        return Dataset(self.images[idx], self.labels[idx], pos)


def silhouettes(count: int) -> np.ndarray:
    """``count`` distinct 4x4 cell masks, half inked, pairwise Hamming distance >= 4."""
    rng = np.random.default_rng(ALPHABET_SEED)
    found: list[np.ndarray] = []
    while len(found) < count:
        m = np.zeros(GLYPH_CELLS * GLYPH_CELLS, dtype=np.uint8)
        m[rng.choice(m.size, m.size // 2, replace=False)] = 1
        if all(np.sum(m != f) >= 4 for f in found):
            found.append(m)
    return np.stack(found).reshape(count, GLYPH_CELLS, GLYPH_CELLS)


def glyph_bitmaps(cfg: GlyphDatasetConfig) -> np.ndarray:
    """``(K, g, g)`` binary glyphs; class ``k`` = silhouette ``k // V``, texture ``k % V``."""
    v = cfg.fine_variants
    shapes = silhouettes(cfg.num_classes // v)
    block = cfg.glyph // GLYPH_CELLS
    out = np.zeros((cfg.num_classes, cfg.glyph, cfg.glyph), dtype=np.uint8)
    for k in range(cfg.num_classes):
        cells = np.kron(shapes[k // v], np.ones((block, block), dtype=np.uint8))
        reps = block // 4 if block >= 4 else 1
        tex = np.tile(_TEXTURES[k % v], (GLYPH_CELLS * reps, GLYPH_CELLS * reps))[: cfg.glyph, : cfg.glyph]
        out[k] = cells * tex
    return out


def _clutter(canvas: np.ndarray, rng: np.random.Generator, density: float, contrast: float):
    side = canvas.shape[-1]
    count = rng.poisson(density * side * side / 1024)
    for _ in range(count):
        colour = rng.uniform(contrast / 4, contrast, 3)
        length = int(rng.integers(4, 21))
        r, c = rng.integers(0, side, 2)
        if rng.random() < 0.5:
            canvas[:, r, c : c + length] = colour[:, None]
        else:
            canvas[:, r : r + length, c] = colour[:, None]


def _place(cfg: GlyphDatasetConfig, rng: np.random.Generator) -> tuple[int, int]:
    top = cfg.canvas - cfg.glyph
    if cfg.placement == "uniform":
        pos = rng.integers(0, top + 1, 2)
    else:
        pos = np.clip(np.round(rng.normal(top / 2, cfg.canvas / 10, 2)), 0, top).astype(int)
    pos = (pos // cfg.align) * cfg.align
    return int(pos[0]), int(pos[1])


def render(cfg: GlyphDatasetConfig, label: int, rng: np.random.Generator, bitmaps=None):
    bitmaps = glyph_bitmaps(cfg) if bitmaps is None else bitmaps
    shape = (3, cfg.canvas, cfg.canvas)
    if cfg.background_noise > 0:
        background = rng.uniform(0.0, cfg.background_noise, shape)
    else:
        background = np.zeros(shape)
    img = background.copy()
    _clutter(img, rng, cfg.clutter_density, cfg.clutter_contrast)
    r, c = _place(cfg, rng)
    g = cfg.glyph
    box = np.s_[:, r : r + g, c : c + g]
    # strokes never cross the glyph box; the background does
    img[box] = background[box]
    img[box][:, bitmaps[label].astype(bool)] = 1.0
    return np.round(img * 255).astype(np.uint8), (r, c)


def _split(cfg: GlyphDatasetConfig, per_class: int, stream: int, bitmaps) -> Dataset:
    rng = np.random.default_rng([cfg.seed, stream])
    labels = np.repeat(np.arange(cfg.num_classes), per_class)
    rng.shuffle(labels)
    images = np.zeros((len(labels), 3, cfg.canvas, cfg.canvas), dtype=np.uint8)
    pos = np.zeros((len(labels), 2), dtype=np.int64)
    for i, y in enumerate(labels):
        images[i], pos[i] = render(cfg, int(y), rng, bitmaps)
    return Dataset(images, labels.astype(np.int64), pos)


def generate_glyph_dataset(cfg: GlyphDatasetConfig | None = None) -> dict[str, Dataset]:
    """Train/test (and optional val) splits drawn from disjoint seed streams."""
    cfg = cfg or GlyphDatasetConfig()
    bitmaps = glyph_bitmaps(cfg)
    out = {
        "train": _split(cfg, cfg.train_per_class, 0, bitmaps),
        "test": _split(cfg, cfg.test_per_class, 1, bitmaps),
    }
    if cfg.val_per_class:
        out["val"] = _split(cfg, cfg.val_per_class, 2, bitmaps)
    return out


# --- portable pixmaps ------------------------------------------------------------------


def write_pnm(path: str | os.PathLike, image: np.ndarray):
    """Write a uint8 ``(H, W)`` array as P5 or ``(3, H, W)`` as P6."""
    a = np.asarray(image)
    if a.dtype != np.uint8:
        raise TypeError("pixmaps are written from uint8 arrays")
    if a.ndim == 2:
        magic, body = b"P5", a
    elif a.ndim == 3 and a.shape[0] == 3:
        magic, body = b"P6", np.ascontiguousarray(a.transpose(1, 2, 0))
    else:
        raise ValueError(f"cannot write shape {a.shape} as a pixmap")
    h, w = body.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(body.tobytes())


def _tokens(data: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated pixmap header")
        out.append(data[start:pos])
    return out, pos + 1


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5/P6 file; returns ``(3, H, W)`` uint8 (greyscale is replicated)."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4, 0)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: only 8-bit binary P5/P6 pixmaps are supported")
    ch = 3 if magic == b"P6" else 1
    body = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=pos)
    if ch == 1:
        return np.repeat(body.reshape(1, h, w), 3, axis=0)
    return body.reshape(h, w, 3).transpose(2, 0, 1).copy()


def load_image_folder(root: str | os.PathLike, canvas: int | None = None) -> tuple[Dataset, list[str]]:
    """Directory-per-class loader for ``.ppm``/``.pgm`` files.

    Classes are the sorted subdirectory names.  Images must share one size,
    or be square and equal to ``canvas`` when given.
    """
    root = Path(root)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise ValueError(f"{root}: no class directories")
    images, labels = [], []
    for k, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() in (".ppm", ".pgm", ".pnm"):
                img = read_pnm(f)
                if canvas is not None and img.shape[1:] != (canvas, canvas):
                    raise ValueError(f"{f}: expected {canvas}x{canvas}, got {img.shape[2]}x{img.shape[1]}")
                images.append(img)
                labels.append(k)
    if len({i.shape for i in images}) > 1:
        raise ValueError(f"{root}: images differ in size")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64)), classes


def save_image_folder(ds: Dataset, root: str | os.PathLike, class_names: list[str] | None = None):
    root = Path(root)
    names = class_names or [f"class_{k:03d}" for k in range(int(ds.labels.max()) + 1)]
    counts: dict[int, int] = {}
    for img, y in zip(ds.images, ds.labels):
        d = root / names[int(y)]
        d.mkdir(parents=True, exist_ok=True)
        i = counts.get(int(y), 0)
        counts[int(y)] = i + 1
        write_pnm(d / f"{i:05d}.ppm", img)
