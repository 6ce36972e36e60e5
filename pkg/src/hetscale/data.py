"""Datasets: IDX files, CIFAR binary batches and synthetic class blobs.

Every loader returns float32 images shaped (N, C, H, W) and int64 labels.
Images are normalized per channel with statistics of the training split,
and batches are shuffled from ``(seed, epoch)`` so a run replays exactly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SIDE = 32

DATASET_KINDS = ("synthetic", "idx", "cifar")


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    path: str | None = None
    num_classes: int = 10
    image_size: int = 28
    channels: int = 1
    num_train: int = 1024
    num_eval: int = 512
    noise: float = 0.6
    seed: int = 0
    hflip: bool = False

    def __post_init__(self):
        if self.name not in DATASET_KINDS:
            raise ValueError(f"dataset name must be one of {DATASET_KINDS}, got {self.name!r}")
        if self.name != "synthetic" and not self.path:
            raise ValueError(f"dataset {self.name!r} needs a path")
        for key in ("num_classes", "image_size", "channels", "num_train", "num_eval"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ValueError(f"unknown dataset keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image and label counts differ")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class Dataset:
    train: Split
    eval: Split
    num_classes: int
    mean: np.ndarray
    std: np.ndarray


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_idx(path: str | os.PathLike) -> np.ndarray:
    """Read an IDX file of unsigned bytes (images 0x803 or labels 0x801)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise ValueError(f"{path}: payload has {len(raw) - header} bytes, dims {dims} need {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError("IDX writer supports 1-D labels or 3-D images")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def read_cifar_batch(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Read a CIFAR binary batch: records of 1 label byte + 3x32x32 pixels."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return images, labels


def _load_idx_dir(root: Path) -> tuple[tuple, tuple]:
    names = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
             "eval": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}
    out = []
    for split in ("train", "eval"):
        img_name, lab_name = names[split]
        images = read_idx(root / img_name)[:, None]
        labels = read_idx(root / lab_name).astype(np.int64)
        out.append((images, labels))
    return out[0], out[1]


def _load_cifar_dir(root: Path) -> tuple[tuple, tuple]:
    train_files = sorted(root.glob("data_batch_*.bin"))
    test_file = root / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise FileNotFoundError(f"{root}: expected data_batch_*.bin and test_batch.bin")
    parts = [read_cifar_batch(f) for f in train_files]
    train = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    return train, read_cifar_batch(test_file)


# ---------------------------------------------------------------------------
# Synthetic class blobs
# ---------------------------------------------------------------------------

def _blob(side: int, cy: np.ndarray, cx: np.ndarray, width: np.ndarray) -> np.ndarray:
    grid = np.arange(side, dtype=np.float64)
    dy = (grid[None, :] - cy[:, None]) ** 2
    dx = (grid[None, :] - cx[:, None]) ** 2
    return np.exp(-(dy[:, :, None] + dx[:, None, :]) / (2.0 * width[:, None, None] ** 2))


def synthetic_blobs(n: int, num_classes: int, side: int, channels: int, seed: int,
                    noise: float = 0.6, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional Gaussian blob images.

    Each class owns three blobs with fixed centers, widths and signs drawn
    from ``seed``. Samples jitter the centers and amplitudes, add a
    class-independent distractor blob, and add pixel noise. ``offset``
    selects a disjoint stream of samples (train vs eval) for the same
    class prototypes.
    """
    proto_rng = np.random.default_rng([seed, 0])
    centers = proto_rng.uniform(0.2 * side, 0.8 * side, size=(num_classes, 3, 2))
    widths = proto_rng.uniform(0.08 * side, 0.18 * side, size=(num_classes, 3))
    signs = proto_rng.choice([-1.0, 1.0], size=(num_classes, 3, channels))

    rng = np.random.default_rng([seed, 1, offset])
    labels = rng.integers(0, num_classes, size=n)
    images = np.zeros((n, channels, side, side))
    for b in range(3):
        c = centers[labels, b] + rng.normal(0.0, 0.06 * side, size=(n, 2))
        amp = rng.uniform(0.6, 1.4, size=n)
        shape = _blob(side, c[:, 0], c[:, 1], widths[labels, b]) * amp[:, None, None]
        images += signs[labels, b][:, :, None, None] * shape[:, None]
    dc = rng.uniform(0.0, side, size=(n, 2))
    distract = _blob(side, dc[:, 0], dc[:, 1], np.full(n, 0.12 * side))
    images += rng.choice([-1.0, 1.0], size=(n, channels))[:, :, None, None] * distract[:, None]
    images += rng.normal(0.0, noise, size=images.shape)
    return images.astype(np.float32), labels.astype(np.int64)


# ---------------------------------------------------------------------------
# Loading, normalization, batching
# ---------------------------------------------------------------------------

def _check_labels(labels: np.ndarray, num_classes: int, split: str) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"{split} labels outside [0, {num_classes}): "
                         f"range [{labels.min()}, {labels.max()}]")


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(np.float32), np.maximum(std, 1e-8).astype(np.float32)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((images.astype(np.float32) - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


def load_dataset(cfg: DatasetConfig) -> Dataset:
    if cfg.name == "synthetic":
        train = synthetic_blobs(cfg.num_train, cfg.num_classes, cfg.image_size, cfg.channels,
                                cfg.seed, cfg.noise, offset=0)
        evals = synthetic_blobs(cfg.num_eval, cfg.num_classes, cfg.image_size, cfg.channels,
                                cfg.seed, cfg.noise, offset=1)
    else:
        root = Path(cfg.path)
        if not root.exists():
            raise FileNotFoundError(f"dataset path {root} does not exist")
        train, evals = _load_idx_dir(root) if cfg.name == "idx" else _load_cifar_dir(root)
    _check_labels(train[1], cfg.num_classes, "train")
    _check_labels(evals[1], cfg.num_classes, "eval")
    mean, std = channel_stats(train[0].astype(np.float32))
    return Dataset(
        train=Split(normalize(train[0], mean, std), train[1].astype(np.int64)),
        eval=Split(normalize(evals[0], mean, std), evals[1].astype(np.int64)),
        num_classes=cfg.num_classes, mean=mean, std=std,
    )


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of ``range(n)`` fixed by ``(seed, epoch)``."""
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def num_batches(n: int, batch_size: int, drop_last: bool = True) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


def train_batches(split: Split, batch_size: int, seed: int, epoch: int,
                  hflip: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled full batches for one epoch (the ragged tail is dropped)."""
    order = epoch_order(len(split), seed, epoch)
    flip_rng = np.random.default_rng([seed, epoch, 0xF11])
    for k in range(num_batches(len(split), batch_size)):
        idx = order[k * batch_size:(k + 1) * batch_size]
        x = split.images[idx]
        if hflip:
            mask = flip_rng.random(len(idx)) < 0.5
            x = x.copy()
            x[mask] = x[mask][..., ::-1]
        yield x, split.labels[idx]


def eval_batches(split: Split, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for start in range(0, len(split), batch_size):
        yield split.images[start:start + batch_size], split.labels[start:start + batch_size]
