"""Datasets: CIFAR binary readers, augmentation, batching and toy generators."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10000


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    class_count: int
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataError(f"{self.name}: {len(self.x)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise DataError(f"{self.name}: labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.y)

    @property
    def sample_shape(self):
        return self.x.shape[1:]

    def subset(self, idx, name=None) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, x=self.x[idx], y=self.y[idx], name=name or self.name)

    def astype(self, dtype) -> "Dataset":
        return replace(self, x=self.x.astype(dtype))


# -- CIFAR ---------------------------------------------------------------------

def _read_records(path, label_bytes: int, records: int | None):
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8)
    rec = label_bytes + CIFAR_PIXELS
    if records is not None and raw.size != records * rec:
        raise FormatError(f"{path}: expected {records * rec} bytes ({records} records), got {raw.size}")
    if raw.size == 0 or raw.size % rec:
        raise FormatError(
            f"{path}: size {raw.size} bytes is not a positive multiple of the {rec}-byte record"
        )
    raw = raw.reshape(-1, rec)
    pixels = raw[:, label_bytes:].reshape(-1, 3, 32, 32)
    # exact float32 quotient p / 255
    x = pixels.astype(np.float32) / np.float32(255)
    return raw[:, :label_bytes], x


def _files(path, names):
    path = Path(path)
    if path.is_dir():
        files = [path / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise DataError(f"missing CIFAR files: {', '.join(missing)}")
        return files, CIFAR_RECORDS_PER_FILE
    if not path.exists():
        raise DataError(f"no such file or directory: {path}")
    return [path], None


def load_cifar10(path, split="train") -> Dataset:
    """Read CIFAR-10 binary records (1 label byte + 3072 R,G,B plane bytes).

    ``path`` is either one batch file (any whole number of records) or the
    ``cifar-10-batches-bin`` directory, in which case ``split`` picks the five
    training files or ``test_batch.bin``. Pixels come back as ``p / 255`` in
    float32; see :func:`channel_stats` / :func:`standardize`.
    """
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    files, records = _files(path, names)
    labels, xs = [], []
    for f in files:
        lab, x = _read_records(f, 1, records)
        labels.append(lab[:, 0])
        xs.append(x)
    return Dataset(np.concatenate(xs), np.concatenate(labels), 10, f"cifar10-{split}")


def load_cifar100(path, split="train") -> Dataset:
    """Read CIFAR-100 binary records (coarse byte, fine byte, 3072 pixels); fine labels are used."""
    names = ["train.bin"] if split == "train" else ["test.bin"]
    files, _ = _files(path, names)
    labels, xs = [], []
    for f in files:
        lab, x = _read_records(f, 2, None)
        labels.append(lab[:, 1])
        xs.append(x)
    return Dataset(np.concatenate(xs), np.concatenate(labels), 100, f"cifar100-{split}")


def channel_stats(ds: Dataset):
    axes = (0, 2, 3) if ds.x.ndim == 4 else (0,)
    mean = ds.x.mean(axis=axes, dtype=np.float64)
    std = ds.x.std(axis=axes, dtype=np.float64)
    return mean, np.where(std > 0, std, 1.0)


def standardize(ds: Dataset, mean, std) -> Dataset:
    shape = (1, -1, 1, 1) if ds.x.ndim == 4 else (1, -1)
    m = np.asarray(mean, ds.x.dtype).reshape(shape)
    s = np.asarray(std, ds.x.dtype).reshape(shape)
    meta = dict(ds.meta, mean=list(map(float, np.ravel(mean))), std=list(map(float, np.ravel(std))))
    return replace(ds, x=((ds.x - m) / s).astype(ds.x.dtype), meta=meta)


# -- augmentation --------------------------------------------------------------

@dataclass
class AugmentPolicy:
    hflip_prob: float = 0.5
    crop_pad: int = 4
    enabled: bool = False

    def __post_init__(self):
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must lie in [0, 1]")
        if self.crop_pad < 0:
            raise ValueError("crop_pad must be >= 0")


def augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Per-image random horizontal flip, then zero-pad and random crop back to size."""
    if not policy.enabled or x.ndim != 4:
        return x
    n, _, h, w = x.shape
    out = x.copy()
    flip = rng.random(n) < policy.hflip_prob
    out[flip] = out[flip, :, :, ::-1]
    p = policy.crop_pad
    if p:
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        oy = rng.integers(0, 2 * p + 1, n)
        ox = rng.integers(0, 2 * p + 1, n)
        for i in range(n):
            out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    return out


# -- batching ------------------------------------------------------------------

def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise DataError("batch size must be >= 1")
    if n == 0:
        raise DataError("cannot batch an empty dataset")
    if batch_size > n:
        raise DataError(f"batch size {batch_size} exceeds dataset size {n}")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


# -- synthetic data ------------------------------------------------------------

def two_moons(n: int = 500, noise_std: float = 0.1, seed: int = 0) -> Dataset:
    if n < 2:
        raise DataError("two_moons needs n >= 2")
    rng = np.random.default_rng(seed)
    n0 = n - n // 2
    n1 = n // 2
    t0 = rng.uniform(0, np.pi, n0)
    t1 = rng.uniform(0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) + rng.normal(0, noise_std, (n, 2))
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], 2, "two-moons")


def gaussian_blobs(n: int = 300, k: int = 3, spread: float = 1.0, seed: int = 0, dim: int = 2) -> Dataset:
    """Isotropic blobs with std ``spread``; adjacent centres sit ``4 * spread`` apart."""
    if n < 2:
        raise DataError("gaussian_blobs needs n >= 2")
    rng = np.random.default_rng(seed)
    radius = 0.0 if k == 1 else 2 * spread / np.sin(np.pi / k)
    angles = 2 * np.pi * np.arange(k) / k
    centres = np.zeros((k, dim))
    centres[:, 0] = radius * np.cos(angles)
    centres[:, 1] = radius * np.sin(angles)
    y = np.arange(n) % k
    x = centres[y] + rng.normal(0, spread, (n, dim))
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], k, "gaussian-blobs", {"centres": centres.tolist()})


def random_images(n: int, classes: int, shape=(3, 8, 8), seed: int = 0) -> Dataset:
    """Gaussian noise images with uniform random labels (gradient-check fodder)."""
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n,) + tuple(shape)), rng.integers(0, classes, n), classes, "random-images")


def to_csv(ds: Dataset, path) -> None:
    flat = ds.x.reshape(len(ds), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{i}" for i in range(flat.shape[1])])
        for label, row in zip(ds.y, flat):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def cifar10_dir(explicit=None):
    """Locate a CIFAR-10 binary directory from an argument or ``FEEDALIGN_CIFAR10``."""
    for cand in (explicit, os.environ.get("FEEDALIGN_CIFAR10"), "data/cifar-10-batches-bin"):
        if cand and Path(cand).is_dir():
            return Path(cand)
    return None
