"""Robust-dataset construction by representation matching.

Each target image is re-synthesised from a starting image (uniform noise by
default) by plain gradient descent on the squared L2 distance between the
robust model's representation of the candidate and of the target.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset, load_idx, save_idx
from .models import Model
from .tensor import NonFiniteError
from .training import train_regular


class DistillationError(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"non-finite distillation objective at step {step}")
        self.step = step


@dataclass(frozen=True)
class DistillConfig:
    steps: int = 1000
    lr: float = 0.1
    init: str = "noise"  # or "other-image", or "target" (identity check)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.init not in ("noise", "other-image", "target"):
            raise ValueError(f"init must be 'noise', 'other-image' or 'target', got {self.init!r}")


@dataclass
class RobustDataset:
    images: np.ndarray
    labels: np.ndarray
    distances: np.ndarray
    init_hashes: list
    failed: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.failed is None:
            self.failed = np.zeros(len(self.labels), dtype=bool)

    def to_dataset(self, provenance=None):
        return Dataset(self.images, self.labels, "train", provenance or {"source": "robust-distillation"})


def _init_images(targets, indices, cfg, pool):
    out = np.empty_like(targets)
    for r, i in enumerate(indices):
        rng = np.random.default_rng([cfg.seed, int(i)])
        if cfg.init == "noise":
            out[r] = rng.uniform(0.0, 1.0, targets.shape[1:])
        elif cfg.init == "target":
            out[r] = targets[r]
        else:
            if pool is None or len(pool) < 2:
                raise ValueError("'other-image' init needs a pool of at least two images")
            j = int(rng.integers(len(pool) - 1))
            j += j >= int(i)  # never the target itself
            out[r] = pool[j]
    return out


def _hash(arr):
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()[:16]


def _objective(model, z, goal):
    """Squared representation distance and its gradient; rows that go non-finite get NaN."""
    def step(zs, gs):
        box = {}

        def cotangent(rep):
            box["diff"] = rep - gs
            return 2.0 * box["diff"]

        _, g = model.representation_vjp(zs, cotangent)
        return (box["diff"] ** 2).sum(axis=1), g

    try:
        return step(z, goal)
    except NonFiniteError:
        dist, grad = np.full(len(z), np.nan), np.zeros_like(z)
        for i in range(len(z)):
            try:
                d, g = step(z[i:i + 1], goal[i:i + 1])
            except NonFiniteError:
                continue
            dist[i], grad[i] = d[0], g[0]
        return dist, grad


def _goal(model, targets):
    try:
        return model.representation(targets)
    except NonFiniteError:
        rows = [_safe_rep(model, t) for t in targets]
        dim = next((len(r) for r in rows if r is not None), 1)  # NaN broadcasts if no row survives
        return np.stack([np.full(dim, np.nan) if r is None else r for r in rows])


def _safe_rep(model, t):
    try:
        return model.representation(t[None])[0]
    except NonFiniteError:
        return None


def distill_batch(targets, model, cfg, indices=None, pool=None, init=None):
    """Distil many targets at once; returns ``(images, curves, inits, failed)``.

    ``curves`` has shape ``(N, steps + 1)``: the distance at the start and after each step.
    A sample whose objective becomes non-finite is reset to its init and flagged.
    """
    targets = np.asarray(targets, dtype=np.float64)
    n = len(targets)
    indices = np.arange(n) if indices is None else np.asarray(indices)
    z0 = _init_images(targets, indices, cfg, pool) if init is None else np.asarray(init, dtype=np.float64).copy()
    goal = _goal(model, targets)
    z = z0.copy()
    failed = np.zeros(n, dtype=bool)
    curves = np.empty((n, cfg.steps + 1))
    for step in range(cfg.steps + 1):
        dist, g = _objective(model, z, goal)
        bad = ~np.isfinite(dist) & ~failed
        if bad.any():
            failed |= bad
            z[bad] = z0[bad]
        curves[:, step] = np.where(failed, np.nan, dist)
        if step == cfg.steps:
            break
        g[failed] = 0.0
        z = np.clip(z - cfg.lr * g, 0.0, 1.0)
        z[failed] = z0[failed]
    return z, curves, z0, failed


def distill_image(target, robust_model, cfg, index=0, pool=None, init=None):
    """Distil one image. Raises :class:`DistillationError` on a non-finite objective."""
    target = np.asarray(target, dtype=np.float64)
    z, curves, _, failed = distill_batch(
        target[None], robust_model, cfg, [index], pool, None if init is None else np.asarray(init)[None])
    if failed[0]:
        step = int(np.argmax(~np.isfinite(curves[0])))
        raise DistillationError(step)
    return z[0], curves[0]


def build_robust_dataset(dataset, robust_model, cfg, chunk=256):
    images, dists, hashes, failed = [], [], [], []
    for start in range(0, len(dataset), chunk):
        idx = np.arange(start, min(start + chunk, len(dataset)))
        z, curves, z0, bad = distill_batch(dataset.images[idx], robust_model, cfg, idx, dataset.images)
        images.append(z)
        dists.append(curves[:, -1])
        hashes += [_hash(row) for row in z0]
        failed.append(bad)
    if not images:
        return RobustDataset(dataset.images[:0].copy(), dataset.labels.copy(), np.zeros(0), [])
    return RobustDataset(np.concatenate(images), dataset.labels.copy(), np.concatenate(dists), hashes,
                         np.concatenate(failed))


def fresh_like(model, seed):
    return Model(model.input_shape, model.layers, model.num_classes, model.tap, seed=seed,
                 chunk_size=model.chunk_size)


def robust_training_pipeline(dataset, adv_model, train_cfg, distill_cfg, return_dataset=False):
    """Distil ``dataset`` through ``adv_model``, then train a fresh copy of its architecture on it."""
    robust = build_robust_dataset(dataset, adv_model, distill_cfg)
    model, _ = train_regular(fresh_like(adv_model, train_cfg.seed), robust.to_dataset(), train_cfg)
    return (model, robust) if return_dataset else model


def save_robust_dataset(robust, directory, stem, extra=None):
    """IDX image/label files plus a JSON sidecar with per-image distances and flags."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_idx(robust.to_dataset(), directory / f"{stem}-images.idx", directory / f"{stem}-labels.idx")
    sidecar = {
        "distances": [float(d) for d in robust.distances],
        "init_hashes": list(robust.init_hashes),
        "failed": [bool(f) for f in robust.failed],
    }
    if extra:
        sidecar.update(extra)
    (directory / f"{stem}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_robust_dataset(directory, stem):
    directory = Path(directory)
    ds = load_idx(directory / f"{stem}-images.idx", directory / f"{stem}-labels.idx")
    side = json.loads((directory / f"{stem}.json").read_text())
    return RobustDataset(ds.images, ds.labels, np.asarray(side["distances"]), side["init_hashes"],
                         np.asarray(side["failed"], dtype=bool))


def config_dict(cfg):
    return asdict(cfg)
