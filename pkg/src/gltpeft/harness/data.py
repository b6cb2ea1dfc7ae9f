"""Synthetic volumes: one bright ellipsoid on a noisy background.

Label 1 ("atrophied") draws the ellipsoid's linear scale from a lower range
than label 0.  ``difficulty`` in [0, 1] slides the two ranges into each
other: 0 leaves them touching (classes separable by structure volume), 1
makes them identical.  Aspect ratios are normalised so the ellipsoid volume
depends on the scale alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import checkpoint
from ..errors import ConfigError

SPLITS = ("train", "val", "test")

# linear scale of the ellipsoid as a fraction of the volume edge
SCALE_LOW, SCALE_MID, SCALE_HIGH = 0.13, 0.18, 0.23


@dataclass
class SyntheticVolume:
    volume: np.ndarray
    mask: np.ndarray
    label: int
    seed: int


@dataclass
class Dataset:
    volumes: np.ndarray  # [n, 1, S, S, S]
    masks: np.ndarray  # [n, 1, S, S, S], {0, 1}
    labels: np.ndarray  # [n], {0, 1}
    seeds: np.ndarray  # [n]
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    difficulty: float = 0.0

    def __len__(self):
        return len(self.labels)

    @property
    def size(self) -> int:
        return self.volumes.shape[-1]

    def item(self, i: int) -> SyntheticVolume:
        return SyntheticVolume(self.volumes[i], self.masks[i], int(self.labels[i]), int(self.seeds[i]))

    def split(self, name: str) -> np.ndarray:
        return self.splits[name]


def scale_range(label: int, difficulty: float, size: int) -> tuple[float, float]:
    width = SCALE_MID - SCALE_LOW
    shift = difficulty * width
    if label == 1:
        lo, hi = SCALE_LOW, SCALE_MID + shift
    else:
        lo, hi = SCALE_MID - shift, SCALE_HIGH
    return lo * size, hi * size


def make_volume(seed: int, label: int, size: int = 32, difficulty: float = 0.0) -> SyntheticVolume:
    rng = np.random.default_rng(seed)
    lo, hi = scale_range(label, difficulty, size)
    scale = rng.uniform(lo, hi)
    log_aspect = rng.uniform(-0.25, 0.25, size=3)
    axes = scale * np.exp(log_aspect - log_aspect.mean())
    centre = (size - 1) / 2 + rng.uniform(-2.0, 2.0, size=3)
    grid = np.arange(size, dtype=np.float64)
    d = [((grid - centre[i]) / axes[i]) ** 2 for i in range(3)]
    inside = (d[0][:, None, None] + d[1][None, :, None] + d[2][None, None, :]) <= 1.0
    mask = inside.astype(np.float64)
    background = 0.15 + 0.06 * rng.standard_normal((size, size, size))
    fg = rng.uniform(0.6, 0.85) + 0.04 * rng.standard_normal((size, size, size))
    volume = np.clip(np.where(inside, fg, background), 0.0, 1.0)
    return SyntheticVolume(volume[None], mask[None], int(label), int(seed))


def ellipsoid_volume(v: SyntheticVolume) -> float:
    return float(v.mask.sum())


def split_sizes(n: int, fractions) -> list[int]:
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) < 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    train = int(math.floor(n * fractions[0] + 0.5))
    val = int(math.floor(n * fractions[1] + 0.5))
    sizes = [train, val, n - train - val]
    for name, f, s in zip(SPLITS, fractions, sizes):
        if f > 0 and s < 2:
            raise ConfigError(f"n={n} too small to populate the {name} split")
        if s < 0:
            raise ConfigError(f"split fractions {fractions} overflow n={n}")
    return sizes


def gen_dataset(n: int, split=(0.3, 0.3, 0.4), seed: int = 1000, difficulty: float = 0.0, size: int = 32) -> Dataset:
    if n < 10:
        raise ConfigError(f"dataset needs n >= 10 subjects, got {n}")
    if not 0.0 <= difficulty <= 1.0:
        raise ConfigError(f"difficulty must lie in [0, 1], got {difficulty}")
    sizes = split_sizes(n, split)
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    labels = rng.permutation(labels)
    seeds = rng.integers(0, 2**31, size=n)

    # interleave the classes so every consecutive chunk is balanced
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels == 0))
    order = []
    for i in range(max(len(pos), len(neg))):
        if i < len(neg):
            order.append(neg[i])
        if i < len(pos):
            order.append(pos[i])
    order = np.asarray(order)
    bounds = np.cumsum([0] + sizes)
    splits = {name: np.sort(order[bounds[i] : bounds[i + 1]]) for i, name in enumerate(SPLITS)}

    items = [make_volume(int(s), int(y), size, difficulty) for s, y in zip(seeds, labels)]
    return Dataset(
        volumes=np.stack([v.volume for v in items]),
        masks=np.stack([v.mask for v in items]),
        labels=labels,
        seeds=seeds,
        splits=splits,
        seed=seed,
        difficulty=difficulty,
    )


def save_dataset(path, ds: Dataset) -> Path:
    path = Path(path)
    records = [
        ("volumes", "data", ds.volumes),
        ("masks", "data", ds.masks),
        ("labels", "data", ds.labels.astype(np.float64)),
        ("seeds", "data", ds.seeds.astype(np.float64)),
    ]
    records += [(f"split.{k}", "data", v.astype(np.float64)) for k, v in ds.splits.items()]
    checkpoint.save(path, records)
    manifest = {
        "n": len(ds),
        "size": ds.size,
        "seed": ds.seed,
        "difficulty": ds.difficulty,
        "positives": int(ds.labels.sum()),
        **{f"split.{k}": len(v) for k, v in ds.splits.items()},
    }
    path.with_suffix(path.suffix + ".manifest").write_text("".join(f"{k} = {v}\n" for k, v in manifest.items()))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    records = {name: arr for name, _, arr in checkpoint.load(path)}
    manifest = {}
    mpath = path.with_suffix(path.suffix + ".manifest")
    if mpath.is_file():
        for line in mpath.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                manifest[k.strip()] = v.strip()
    try:
        return Dataset(
            volumes=records["volumes"],
            masks=records["masks"],
            labels=records["labels"].astype(np.int64),
            seeds=records["seeds"].astype(np.int64),
            splits={k: records[f"split.{k}"].astype(np.int64) for k in SPLITS},
            seed=int(manifest.get("seed", 0)),
            difficulty=float(manifest.get("difficulty", 0.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"dataset file {path} lacks record {exc.args[0]}") from None
