"""Seeded synthetic segmentation task: textured shapes over noise.

Shape classes differ by texture (horizontal stripes, vertical stripes,
checkerboard) rather than colour, so a useful model needs spatial filters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPLITS = ("trainA", "trainB", "val")


@dataclass(frozen=True)
class TaskConfig:
    height: int = 64
    width: int = 128
    num_classes: int = 4
    n_train: int = 256
    n_val: int = 64
    min_shapes: int = 2
    max_shapes: int = 4
    noise: float = 0.25
    period: tuple[float, float] = (3.0, 6.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.n_train < 2 or self.n_train % 2:
            raise ValueError("n_train must be a positive even number")


@dataclass
class TaskDataset:
    split: str
    indices: np.ndarray  # sample ids, disjoint across splits
    images: np.ndarray  # (N, 3, H, W)
    labels: np.ndarray  # (N, H, W) int

    def __len__(self) -> int:
        return len(self.indices)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield (ids, images, labels); shuffled when ``rng`` is given, last partial batch kept."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            sel = order[start : start + batch_size]
            yield self.indices[sel], self.images[sel], self.labels[sel]


def _texture(kind: int, yy: np.ndarray, xx: np.ndarray, period: float, phase: float) -> np.ndarray:
    if kind == 1:
        return np.sign(np.sin(2 * np.pi * yy / period + phase))
    if kind == 2:
        return np.sign(np.sin(2 * np.pi * xx / period + phase))
    return np.sign(np.sin(np.pi * yy / period + phase) * np.sin(np.pi * xx / period + phase))


def render_sample(sample_id: int, cfg: TaskConfig) -> tuple[np.ndarray, np.ndarray]:
    """One (image, label) pair; a pure function of (cfg.seed, sample_id)."""
    rng = np.random.default_rng([cfg.seed, sample_id])
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    bg = rng.uniform(-0.5, 0.5, size=(3, 1, 1))
    image = bg + cfg.noise * rng.standard_normal((3, h, w))
    label = np.zeros((h, w), dtype=np.int64)
    for _ in range(rng.integers(cfg.min_shapes, cfg.max_shapes + 1)):
        kind = int(rng.integers(1, cfg.num_classes))
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(h / 8, h / 3), rng.uniform(w / 10, w / 4)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        color = rng.uniform(-0.5, 0.5, size=(3, 1, 1))
        amp = rng.uniform(0.4, 0.8)
        tex = _texture(kind, yy, xx, rng.uniform(*cfg.period), rng.uniform(0, 2 * np.pi))
        patch = color + amp * tex[None] + cfg.noise * rng.standard_normal((3, h, w))
        image = np.where(mask[None], patch, image)
        label[mask] = kind % cfg.num_classes
    return image, label


def make_task(cfg: TaskConfig = TaskConfig()) -> dict[str, TaskDataset]:
    """trainA/trainB are a seeded disjoint halving of the training ids; val ids follow them."""
    perm = np.random.default_rng([cfg.seed, 7]).permutation(cfg.n_train)
    half = cfg.n_train // 2
    ids = {
        "trainA": np.sort(perm[:half]),
        "trainB": np.sort(perm[half:]),
        "val": np.arange(cfg.n_train, cfg.n_train + cfg.n_val),
    }
    out = {}
    for split, idx in ids.items():
        pairs = [render_sample(int(i), cfg) for i in idx]
        images = np.stack([p[0] for p in pairs]) if pairs else np.zeros((0, 3, cfg.height, cfg.width))
        labels = np.stack([p[1] for p in pairs]) if pairs else np.zeros((0, cfg.height, cfg.width), int)
        out[split] = TaskDataset(split, idx, images, labels)
    return out
