"""Datasets (IDX files, synthetic blobs) and on-device partitioning schemes."""
from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class IdxFormatError(DataError):
    pass


def normalize(raw: np.ndarray) -> np.ndarray:
    """Map bytes 0..255 onto [-1, 1]."""
    return np.asarray(raw, dtype=np.float64) / 127.5 - 1.0


def denormalize(x: np.ndarray) -> np.ndarray:
    return np.rint((np.asarray(x) + 1.0) * 127.5).astype(np.uint8)


@dataclass(eq=False)
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W] in [-1, 1]
    labels: np.ndarray  # [N] ints in [0, classes)
    classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if len(self.labels) != len(self.images):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise DataError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


# IDX -------------------------------------------------------------------------

def _read_bytes(path: str | os.PathLike) -> bytes:
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(path: str | os.PathLike) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped)."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08:
        raise IdxFormatError(f"{path}: bad magic 0x{int.from_bytes(data[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    n = int(np.prod(dims)) if dims else 0
    if len(data) - header < n:
        raise IdxFormatError(f"{path}: truncated file, expected {n} data bytes, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=header).reshape(dims)


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IdxFormatError("only unsigned-byte IDX files are supported")
    payload = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


def load_idx_dataset(images_path, labels_path, classes: int | None = None) -> LabeledDataset:
    for p in (images_path, labels_path):
        if not Path(p).exists():
            raise DataError(f"{p}: no such file")
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    magic_i = 0x800 + images.ndim
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic_i:08x}")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{0x800 + labels.ndim:08x}")
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    if classes is None:
        classes = int(labels.max()) + 1
    return LabeledDataset(normalize(images)[:, None, :, :], labels.astype(np.int64), classes)


def shrink_images(ds: LabeledDataset, crop: int = 0, pool: int = 1) -> LabeledDataset:
    """Drop ``crop`` border pixels on every side, then average-pool by ``pool``."""
    if crop < 0 or pool < 1:
        raise DataError("crop must be >= 0 and pool >= 1")
    x = ds.images
    if crop:
        x = x[:, :, crop:-crop, crop:-crop]
    n, c, h, w = x.shape
    if h < pool or w < pool or h == 0:
        raise DataError(f"cannot pool {h}x{w} images by {pool}")
    if pool > 1:
        h, w = h // pool, w // pool
        x = x[:, :, : h * pool, : w * pool].reshape(n, c, h, pool, w, pool).mean(axis=(3, 5))
    return LabeledDataset(x, ds.labels, ds.classes)


# Synthetic fixture -------------------------------------------------------------

def make_synthetic_dataset(
    classes: int,
    per_class: int,
    shape: tuple[int, int, int] = (1, 16, 16),
    seed: int = 0,
    noise: float = 0.3,
) -> LabeledDataset:
    """One Gaussian bump per class, centred on a ring, plus pixel noise.

    Class means are distinct smooth images, so the classes are linearly
    separable for moderate ``noise``.
    """
    if classes < 2:
        raise DataError("need at least two classes")
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    radius = 0.3 * min(h, w)
    width = 0.12 * min(h, w)
    means = []
    for k in range(classes):
        ang = 2 * np.pi * k / classes
        cy, cx = (h - 1) / 2 + radius * np.sin(ang), (w - 1) / 2 + radius * np.cos(ang)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        means.append(np.broadcast_to(2 * bump - 1, (c, h, w)))
    means = np.stack(means)
    labels = np.repeat(np.arange(classes), per_class)
    images = means[labels] + noise * rng.standard_normal((len(labels), c, h, w))
    order = rng.permutation(len(labels))
    return LabeledDataset(np.clip(images[order], -1, 1), labels[order], classes)


def make_noise_dataset(n: int, shape: tuple[int, int, int], classes: int, seed: int = 0) -> LabeledDataset:
    """Uniform [-1, 1] noise images with placeholder labels (an unlabeled public set)."""
    if n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.uniform(-1.0, 1.0, size=(n,) + tuple(shape)), np.zeros(n, dtype=np.int64), classes)


# Partitioning ----------------------------------------------------------------

@dataclass(eq=False)
class PartitionPlan:
    assignments: list[np.ndarray]
    scheme: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def num_devices(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "params": self.params,
            "seed": self.seed,
            "assignments": [a.tolist() for a in self.assignments],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> PartitionPlan:
        return cls([np.asarray(a, dtype=np.int64) for a in d["assignments"]], d["scheme"], d["params"], d["seed"])


def partition_iid(ds: LabeledDataset, num_devices: int, seed: int) -> PartitionPlan:
    if num_devices < 1:
        raise DataError("num_devices must be >= 1")
    if num_devices > len(ds):
        raise DataError(f"cannot split {len(ds)} samples over {num_devices} devices")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return PartitionPlan([np.sort(a) for a in np.array_split(perm, num_devices)], "iid", {}, seed)


def partition_quantity_skew(ds: LabeledDataset, num_devices: int, classes_per_device: int, seed: int) -> PartitionPlan:
    """Every device owns exactly ``classes_per_device`` labels.

    Labels are dealt round-robin over a seeded class permutation, so with
    ``num_devices * classes_per_device >= classes`` every label has an owner;
    a label's samples are split evenly among its owners.
    """
    n_cls = ds.classes
    c = classes_per_device
    if not 1 <= c <= n_cls:
        raise DataError(f"classes_per_device must lie in [1, {n_cls}]")
    if num_devices * c < n_cls:
        raise DataError(f"{num_devices} devices x {c} classes cannot cover {n_cls} classes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_cls)
    owned = [[int(order[(k * c + j) % n_cls]) for j in range(c)] for k in range(num_devices)]
    owners: dict[int, list[int]] = {cls: [] for cls in range(n_cls)}
    for k, labels in enumerate(owned):
        for cls in labels:
            owners[cls].append(k)
    parts: list[list[np.ndarray]] = [[] for _ in range(num_devices)]
    for cls in range(n_cls):
        idx = np.flatnonzero(ds.labels == cls)
        if len(idx) < len(owners[cls]):
            raise DataError(f"class {cls} has {len(idx)} samples for {len(owners[cls])} owners")
        idx = rng.permutation(idx)
        for k, chunk in zip(owners[cls], np.array_split(idx, len(owners[cls]))):
            parts[k].append(chunk)
    assignments = [np.sort(np.concatenate(p)) for p in parts]
    return PartitionPlan(assignments, "quantity", {"classes_per_device": c}, seed)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to ``proportions`` summing exactly to ``total``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # ties go to the lower index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(
    ds: LabeledDataset, num_devices: int, beta: float, seed: int, min_per_device: int = 0
) -> PartitionPlan:
    """Per-class device shares drawn from Dirichlet(beta * 1_K).

    With ``min_per_device > 0`` the whole draw is repeated (same stream) until
    every device holds at least that many samples.
    """
    if beta <= 0:
        raise DataError("beta must be positive")
    if num_devices < 1:
        raise DataError("num_devices must be >= 1")
    if min_per_device * num_devices > len(ds):
        raise DataError("min_per_device is unattainable for this dataset")
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        parts: list[list[np.ndarray]] = [[] for _ in range(num_devices)]
        for cls in range(ds.classes):
            idx = rng.permutation(np.flatnonzero(ds.labels == cls))
            g = rng.gamma(beta, 1.0, size=num_devices)
            if g.sum() == 0:
                g[rng.integers(num_devices)] = 1.0
            counts = largest_remainder(g / g.sum(), len(idx))
            for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                parts[k].append(chunk)
        assignments = [np.sort(np.concatenate(p)) for p in parts]
        if min(len(a) for a in assignments) >= min_per_device:
            return PartitionPlan(assignments, "dirichlet", {"beta": beta, "min_per_device": min_per_device}, seed)
    raise DataError(f"could not reach min_per_device={min_per_device} in 1000 draws")


def make_partition(ds: LabeledDataset, num_devices: int, scheme: str, seed: int, **params) -> PartitionPlan:
    if scheme == "iid":
        return partition_iid(ds, num_devices, seed)
    if scheme == "quantity":
        return partition_quantity_skew(ds, num_devices, params["classes_per_device"], seed)
    if scheme == "dirichlet":
        return partition_dirichlet(ds, num_devices, params["beta"], seed, params.get("min_per_device", 0))
    raise DataError(f"unknown partition scheme {scheme!r}")
