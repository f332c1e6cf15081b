"""Synthetic four-class cloud scenes, patch cropping, splits, and dataset directory IO.

Labels: 0 clear sky, 1 thick cloud, 2 thin cloud, 3 cloud shadow.
"""

import os
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .tensor import load_cst, save_cst

CLASS_NAMES = ("clear", "thick_cloud", "thin_cloud", "shadow")
CLEAR, THICK, THIN, SHADOW = range(4)

COVER_BANDS = {"low": (0.0, 0.35), "medium": (0.35, 0.65), "high": (0.65, 1.0)}
SHADOW_OFFSET = (12, 12)
# cloud field lattice spacing in pixels; one smooth octave gives compact blobs
CLOUD_CELL = 40


@dataclass
class SceneSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    mask: np.ndarray  # int64 [H, W]
    geometry: Optional[dict] = field(default=None, repr=False)
    name: Optional[str] = None

    def __eq__(self, other):
        return (isinstance(other, SceneSample) and np.array_equal(self.image, other.image)
                and np.array_equal(self.mask, other.mask))


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W]
    masks: np.ndarray  # [N, H, W]

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            return cls(np.zeros((0, 3, 0, 0), np.float32), np.zeros((0, 0, 0), np.int64))
        return cls(np.stack([s.image for s in samples]).astype(np.float32),
                   np.stack([s.mask for s in samples]).astype(np.int64))

    def samples(self):
        return [SceneSample(i, m) for i, m in zip(self.images, self.masks)]


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(rng, h, w, cell):
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw))
    ys, xs = np.arange(h) / cell, np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = _smoothstep(ys - y0)[:, None], _smoothstep(xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _fbm(rng, h, w, cells, weights):
    f = sum(wt * _value_noise(rng, h, w, c) for c, wt in zip(cells, weights))
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)


def _shift(m, dy, dx):
    out = np.zeros_like(m)
    h, w = m.shape
    if dy < h and dx < w:
        out[dy:, dx:] = m[:h - dy, :w - dx]
    return out


def mask_from_geometry(geo):
    """Labels derived purely from the stored cloud field and thresholds."""
    field_, t_cloud, t_thick = geo["field"], geo["t_cloud"], geo["t_thick"]
    cloud = field_ >= t_cloud if geo["cover"] > 0 else np.zeros(field_.shape, bool)
    thick = cloud & (field_ >= t_thick)
    thin = cloud & ~thick
    shadow = _shift(thick, *geo["shadow_offset"]) & ~cloud
    mask = np.full(field_.shape, CLEAR, np.int64)
    mask[shadow] = SHADOW
    mask[thin] = THIN
    mask[thick] = THICK
    return mask


def thick_alpha(geo):
    cloud = geo["field"] >= geo["t_cloud"] if geo["cover"] > 0 else np.zeros(geo["field"].shape, bool)
    return (cloud & (geo["field"] >= geo["t_thick"])).astype(np.float64)


def synth_scene(seed, h=64, w=64, cloud_cover=0.5):
    """Procedural scene with exact labels; ``cloud_cover`` is the cloudy pixel fraction."""
    if not 0.0 <= cloud_cover <= 1.0:
        raise ConfigError(f"cloud_cover must lie in [0, 1], got {cloud_cover}")
    rng = np.random.default_rng(seed)
    terrain = _fbm(rng, h, w, (16, 6), (1.0, 0.3))
    detail = rng.random((h, w))
    green = np.array([0.22, 0.38, 0.18])[:, None, None]
    brown = np.array([0.50, 0.40, 0.26])[:, None, None]
    image = green * (1 - terrain) + brown * terrain + 0.04 * (detail - 0.5)

    field_ = _fbm(rng, h, w, (CLOUD_CELL,), (1.0,))
    t_cloud = float(np.quantile(field_, 1.0 - cloud_cover, method="inverted_cdf")) if cloud_cover > 0 else 1.0
    cloud = field_ >= t_cloud if cloud_cover > 0 else np.zeros((h, w), bool)
    thick_frac = rng.uniform(0.4, 0.7)
    if cloud.any():
        t_thick = float(np.quantile(field_[cloud], 1.0 - thick_frac, method="inverted_cdf"))
    else:
        t_thick = 1.0
    geo = {"field": field_, "t_cloud": t_cloud, "t_thick": t_thick, "cover": cloud_cover,
           "shadow_offset": SHADOW_OFFSET}
    mask = mask_from_geometry(geo)

    shadow = mask == SHADOW
    image = np.where(shadow[None], image * 0.4, image)
    thin = mask == THIN
    span = max(t_thick - t_cloud, 1e-9)
    alpha = np.clip(0.35 + 0.35 * (field_ - t_cloud) / span, 0.0, 0.7)
    veil = 0.9 * alpha + image * (1 - alpha)
    image = np.where(thin[None], veil, image)
    texture = 0.88 + 0.08 * detail
    image = np.where((mask == THICK)[None], texture[None].repeat(3, 0), image)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SceneSample(image, mask, geo)


def realized_cover(mask):
    return float(np.isin(mask, (THICK, THIN)).mean())


def draw_cover(rng, cover):
    """Cover fraction from a band name, 'mixed' (random band), or a number."""
    if isinstance(cover, str):
        if cover == "mixed":
            cover = ("low", "medium", "high")[rng.integers(3)]
        if cover not in COVER_BANDS:
            raise ConfigError(f"unknown cover band {cover!r}")
        lo, hi = COVER_BANDS[cover]
        return float(rng.uniform(lo, hi))
    return float(cover)


def generate(count, h, w, cover="mixed", seed=42):
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 63 - 1, size=count)
    return [synth_scene(int(s), h, w, draw_cover(rng, cover)) for s in seeds]


def crop_patches(image, mask, patch, drop_empty=False):
    """Non-overlapping ``patch x patch`` crops; remainders are discarded."""
    h, w = mask.shape
    if patch > min(h, w):
        raise ConfigError(f"patch {patch} larger than tile {h}x{w}")
    out = []
    for i in range(h // patch):
        for j in range(w // patch):
            sl = (slice(i * patch, (i + 1) * patch), slice(j * patch, (j + 1) * patch))
            m = mask[sl]
            if drop_empty and np.all(m == CLEAR):
                continue
            out.append(SceneSample(np.ascontiguousarray(image[:, sl[0], sl[1]]), np.ascontiguousarray(m)))
    return out


def split(samples, ratios, seed=42):
    """Seeded shuffle then contiguous train/val/test partition by ``ratios``."""
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ConfigError(f"split ratios must be three non-negative numbers with positive sum, got {ratios}")
    n = len(samples)
    if n == 0:
        raise ConfigError("cannot split an empty sample list")
    order = np.random.default_rng(seed).permutation(n)
    total = sum(ratios)
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    n_val = min(n_val, n - n_train)
    if ratios[2] == 0:
        n_val = n - n_train
    parts = {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    return {k: [samples[i] for i in idx] for k, idx in parts.items()}


def write_pgm(path, mask):
    m = np.asarray(mask)
    if m.ndim != 2 or m.min(initial=0) < 0 or m.max(initial=0) > 255:
        raise DataError(f"{path}: mask must be 2-D with values in [0, 255]")
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(m.astype(np.uint8).tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise DataError(f"{path}: malformed PGM header (expected binary P5)")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"{path}: PGM maxval must be 255, got {maxval}")
    body = raw[m.end():]
    if len(body) != w * h:
        raise DataError(f"{path}: PGM payload has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.int64)


def save_dir(samples, path):
    os.makedirs(path, exist_ok=True)
    for i, s in enumerate(samples):
        save_cst(os.path.join(path, f"{i:04d}.cst"), s.image)
        write_pgm(os.path.join(path, f"{i:04d}.pgm"), s.mask)


def load_dir(path, num_classes=4):
    """Load ``NNNN.cst`` / ``NNNN.pgm`` pairs sorted by stem."""
    if not os.path.isdir(path):
        raise DataError(f"{path}: not a directory")
    stems = {}
    for name in os.listdir(path):
        stem, ext = os.path.splitext(name)
        if ext in (".cst", ".pgm"):
            stems.setdefault(stem, set()).add(ext)
    samples = []
    for stem in sorted(stems):
        exts = stems[stem]
        if exts != {".cst", ".pgm"}:
            missing = "mask" if ".pgm" not in exts else "image"
            raise DataError(f"{path}: sample {stem} has no {missing} file")
        image = load_cst(os.path.join(path, stem + ".cst"))
        mask = read_pgm(os.path.join(path, stem + ".pgm"))
        if mask.max(initial=0) >= num_classes:
            raise DataError(f"{path}/{stem}.pgm: label {int(mask.max())} >= {num_classes} classes")
        if image.ndim != 3 or image.shape[1:] != mask.shape:
            raise DataError(f"{path}/{stem}: image {image.shape} does not match mask {mask.shape}")
        samples.append(SceneSample(image, mask, name=stem))
    return samples


def build_splits(data_cfg, num_classes=4):
    """Train/val/test :class:`Dataset` objects from a directory or the synthetic generator."""
    if data_cfg.path:
        samples = load_dir(data_cfg.path, num_classes)
    else:
        h, w = data_cfg.size
        samples = generate(data_cfg.count, h, w, data_cfg.cover, data_cfg.seed)
    parts = split(samples, data_cfg.split, data_cfg.seed)
    return {k: Dataset.from_samples(v) for k, v in parts.items()}
