"""Datasets: IDX persistence, synthetic corpora and seeded splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Images ``(N, C, H, W)`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and not (np.all(np.isfinite(self.images))
                                     and self.images.min() >= 0.0 and self.images.max() <= 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, index, split=None):
        index = np.asarray(index, dtype=np.intp)
        prov = dict(self.provenance, subset=len(index))
        return Dataset(self.images[index], self.labels[index], split or self.split, prov)

    def head(self, n):
        return self.subset(np.arange(min(n, len(self))))


# -- IDX --------------------------------------------------------------------


def _read_idx(path, expected_magic):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: file too short")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic and not (expected_magic == IMAGES_MAGIC and magic == 0x00000804):
        raise IdxFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header != size:
        raise IdxFormatError(f"{path}: payload has {len(data) - header} bytes, header says {size}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split="train"):
    raw = _read_idx(images_path, IMAGES_MAGIC)
    labels = _read_idx(labels_path, LABELS_MAGIC)
    if len(raw) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(raw)} images vs {len(labels)} labels")
    images = raw.astype(np.float64) / 255.0
    if images.ndim == 3:
        images = images[:, None]
    return Dataset(images, labels.astype(np.int64), split,
                   {"source": "idx", "images": str(images_path), "labels": str(labels_path)})


def save_idx(dataset, images_path, labels_path):
    """Write images as u8 (pixel * 255, rounded) and labels as u8."""
    imgs = np.rint(dataset.images * 255.0).astype(np.uint8)
    if imgs.shape[1] == 1:
        imgs = imgs[:, 0]
    if dataset.labels.min(initial=0) < 0 or dataset.labels.max(initial=0) > 255:
        raise IdxFormatError("labels must fit in one byte")
    magic = 0x00000800 | imgs.ndim
    Path(images_path).write_bytes(struct.pack(f">I{imgs.ndim}I", magic, *imgs.shape) + imgs.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(dataset.labels))
                                  + dataset.labels.astype(np.uint8).tobytes())


# -- synthetic corpora ---------------------------------------------------------


def make_blobs(n_per_class, num_classes, dim, separation, seed, sigma=1.0):
    """Isotropic Gaussian blobs, linearly rescaled into [0, 1].

    Centers are redrawn until every pair is at least ``separation`` apart
    (in units of the raw, pre-rescaling space, where the noise std is ``sigma``).
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    scale = separation * max(1.0, np.sqrt(num_classes))
    for _ in range(1000):
        centers = rng.uniform(-scale, scale, (num_classes, dim))
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        if num_classes < 2 or d[np.triu_indices(num_classes, 1)].min() >= separation:
            break
        scale *= 1.05
    points = np.concatenate([c + sigma * rng.standard_normal((n_per_class, dim)) for c in centers])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    lo, hi = points.min(), points.max()
    images = ((points - lo) / (hi - lo)).reshape(-1, 1, 1, dim)
    return Dataset(images, labels, "train", {"source": "blobs", "seed": seed, "separation": separation})


def _ellipse(cx, cy, rx, ry, start=0.0, stop=2 * np.pi, n=24):
    t = np.linspace(start, stop, n)
    return [(cx + rx * np.cos(a), cy + ry * np.sin(a)) for a in t]


# digit skeletons in a unit box, x to the right and y downward
GLYPHS = {
    0: [_ellipse(0.5, 0.5, 0.32, 0.45)],
    1: [[(0.32, 0.22), (0.52, 0.04), (0.52, 0.96)]],
    2: [_ellipse(0.5, 0.3, 0.32, 0.26, np.pi, 2.25 * np.pi, 12) + [(0.15, 0.95), (0.88, 0.95)]],
    3: [_ellipse(0.48, 0.27, 0.3, 0.23, 1.1 * np.pi, 2.5 * np.pi, 12),
        _ellipse(0.48, 0.73, 0.33, 0.24, 1.5 * np.pi, 2.9 * np.pi, 12)],
    4: [[(0.68, 0.96), (0.68, 0.04), (0.1, 0.66), (0.9, 0.66)]],
    5: [[(0.84, 0.05), (0.24, 0.05), (0.2, 0.45)]
        + _ellipse(0.5, 0.68, 0.33, 0.27, 1.2 * np.pi, 2.8 * np.pi, 14)],
    6: [[(0.72, 0.04), (0.34, 0.38)] + _ellipse(0.5, 0.7, 0.3, 0.26, np.pi, 3 * np.pi, 18)],
    7: [[(0.1, 0.05), (0.9, 0.05), (0.42, 0.96)]],
    8: [_ellipse(0.5, 0.26, 0.24, 0.22), _ellipse(0.5, 0.72, 0.3, 0.25)],
    9: [_ellipse(0.5, 0.3, 0.28, 0.25), [(0.78, 0.3), (0.62, 0.96)]],
}


def _render_glyph(digit, rng, size=28, supersample=4):
    """One glyph with random pose, stroke width and contrast, plus pixel noise."""
    big = size * supersample
    angle = np.deg2rad(rng.uniform(-12, 12))
    scale = rng.uniform(0.85, 1.1)
    shear = rng.uniform(-0.25, 0.25)
    width = rng.uniform(1.6, 3.0) * supersample
    shift = rng.uniform(-2.0, 2.0, 2) * supersample
    box = 20 * supersample * scale
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    mat = rot @ np.array([[1.0, shear], [0.0, 1.0]])
    img = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(img)
    for stroke in GLYPHS[digit]:
        pts = np.asarray(stroke) + rng.normal(0, 0.025, (len(stroke), 2))
        pts = (pts - 0.5) * box @ mat.T + big / 2 + shift
        coords = [tuple(p) for p in pts]
        draw.line(coords, fill=255, width=int(round(width)), joint="curve")
        r = width / 2
        for x, y in (coords[0], coords[-1]):
            draw.ellipse([x - r, y - r, x + r, y + r], fill=255)
    ink = np.asarray(img.resize((size, size), Image.BOX), dtype=np.float64) / 255.0
    contrast = rng.uniform(0.7, 1.0)
    out = contrast * ink + rng.normal(0, 0.03, (size, size))
    return np.clip(out, 0.0, 1.0)


def make_glyph_digits(n, seed, split="train", num_classes=10):
    """Procedurally rendered 28x28 digit-like glyphs, balanced over classes.

    Deterministic under ``seed``; sample ``i`` has label ``i % num_classes``
    before a seeded shuffle.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    images = np.stack([_render_glyph(int(d), rng) for d in labels])[:, None]
    perm = rng.permutation(n)
    return Dataset(images[perm], labels[perm], split, {"source": "glyphs", "seed": seed, "n": n})


def desk_corpus(seed=0, n_train=5000, n_test=1000):
    """The standard desk corpus: 28x28 single-channel, 10 classes."""
    ss = np.random.SeedSequence(seed).spawn(2)
    train = make_glyph_digits(n_train, int(ss[0].generate_state(1)[0]), "train")
    test = make_glyph_digits(n_test, int(ss[1].generate_state(1)[0]), "test")
    return train, test


def split(dataset, fraction, seed):
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = len(dataset)
    n_train = int(round(fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} samples at {fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[:n_train]), "train"), dataset.subset(np.sort(perm[n_train:]), "test")
