"""Datasets, the r% non-IID partitioner, epoch batch plans and IDX ingestion."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError, ShapeError, WeightError
from .nn import WEIGHT_SUM_TOL, ModelParams, SmashedData

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Features plus integer labels (classification) or real targets (regression).

    ``n_classes`` is None for regression data.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ShapeError("features must be a non-empty 2-D array")
        if len(self.labels) != len(self.features):
            raise ShapeError(f"{len(self.features)} samples but {len(self.labels)} labels")
        if self.n_classes is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise ShapeError(f"labels outside [0, {self.n_classes})")
        else:
            self.labels = np.asarray(self.labels, dtype=np.float64)

    def __len__(self):
        return len(self.features)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.n_classes)


@dataclass
class Shard:
    indices: np.ndarray
    weight: float
    client_id: int

    def __len__(self):
        return len(self.indices)


@dataclass
class BatchPlan:
    batches: list
    epoch_seed: object


@dataclass
class ConstantsEstimate:
    """Probe-set maxima; these are lower bounds on the true assumption constants."""

    sigma_n: np.ndarray
    R_hat: float
    delta_hat: float
    probe_count: int

    def to_dict(self) -> dict:
        return {
            "sigma_n": [float(s) for s in self.sigma_n],
            "R_hat": float(self.R_hat),
            "delta_hat": float(self.delta_hat),
            "probe_count": int(self.probe_count),
        }


def gen_synthetic_classification(d: int, classes: int, per_class: int, spread: float, seed) -> Dataset:
    """Gaussian blobs around seeded random centers of norm 2, ordered by class."""
    if classes < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 sample per class")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, d))
    centers = 2.0 * centers / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.standard_normal((classes * per_class, d))
    return Dataset(centers[labels] + spread * noise, labels, classes)


def holdout_split(dataset: Dataset, fraction: float, seed) -> tuple[Dataset, Dataset]:
    """Seeded split into (train, held-out) with ``round(fraction * D)`` held-out samples."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    n_out = int(round(fraction * len(dataset)))
    return dataset.subset(np.sort(perm[n_out:])), dataset.subset(np.sort(perm[:n_out]))


def shard_weights(sizes, weights_mode: str = "by_size") -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if weights_mode == "uniform":
        return np.full(len(sizes), 1.0 / len(sizes))
    if weights_mode == "by_size":
        return sizes / sizes.sum()
    raise ValueError(f"unknown weights_mode {weights_mode!r}")


def partition_noniid(dataset: Dataset, n_clients: int, r: float, weights_mode: str = "by_size", seed=0) -> list:
    """Split ``dataset`` into ``n_clients`` shards with non-IID ratio ``r``.

    A seeded shuffle selects ``floor((1 - r) * D)`` samples that are dealt
    round-robin.  The rest are stably sorted by (label, index) and cut into
    ``n_clients`` contiguous blocks (the last block takes the remainder);
    block k goes to client k.
    """
    D = len(dataset)
    if n_clients < 1 or D < n_clients:
        raise ValueError(f"cannot split {D} samples over {n_clients} clients")
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"non-IID ratio {r} outside [0, 1]")
    n_uniform = math.floor(round((1.0 - r) * D, 9))  # 0.1*100 must count as 10
    rng = np.random.default_rng(seed)
    perm = rng.permutation(D)
    uniform, rest = perm[:n_uniform], perm[n_uniform:]
    if dataset.n_classes is not None:
        rest = rest[np.lexsort((rest, dataset.labels[rest]))]
    else:
        rest = np.sort(rest)
    block = len(rest) // n_clients
    parts = []
    for k in range(n_clients):
        dealt = uniform[k::n_clients]
        stop = len(rest) if k == n_clients - 1 else (k + 1) * block
        parts.append(np.sort(np.concatenate([dealt, rest[k * block:stop]])).astype(np.int64))
    weights = shard_weights([len(p) for p in parts], weights_mode)
    return [Shard(p, float(w), k) for k, (p, w) in enumerate(zip(parts, weights))]


def check_shards(shards) -> None:
    total = math.fsum(s.weight for s in shards)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise WeightError(f"shard weights sum to {total!r}")


def make_batch_plan(shard: Shard, batch_size: int, n_batches: int, epoch_seed) -> BatchPlan:
    """``n_batches`` batches of ``batch_size`` from a seeded permutation of the shard.

    When the shard is smaller than ``n_batches * batch_size`` the permutation
    is redrawn for each further lap.  Indices inside a batch are sorted so a
    batch equal to the whole shard reproduces the full-shard gradient exactly.
    """
    if batch_size < 1 or n_batches < 1:
        raise ValueError("batch size and batch count must be positive")
    if len(shard) == 0:
        raise ShapeError(f"client {shard.client_id} has an empty shard")
    need = batch_size * n_batches
    seq = np.random.SeedSequence(epoch_seed)
    laps = [np.random.default_rng(s).permutation(shard.indices) for s in seq.spawn(math.ceil(need / len(shard)))]
    order = np.concatenate(laps)[:need]
    batches = [np.sort(order[m * batch_size:(m + 1) * batch_size]) for m in range(n_batches)]
    return BatchPlan(batches, epoch_seed)


def _read_header(buf: bytes, path, magic: int, ndim: int):
    if len(buf) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    return dims, 4 + 4 * ndim


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (unsigned bytes); pixels are scaled to [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    (count, rows, cols), off = _read_header(img, images_path, IDX_IMAGES_MAGIC, 3)
    if len(img) - off < count * rows * cols:
        raise FormatError(f"{images_path}: truncated, expected {count * rows * cols} pixel bytes")
    (n_labels,), loff = _read_header(lab, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lab) - loff < n_labels:
        raise FormatError(f"{labels_path}: truncated, expected {n_labels} labels")
    if n_labels != count:
        raise FormatError(f"{count} images but {n_labels} labels")
    pixels = np.frombuffer(img, dtype=np.uint8, count=count * rows * cols, offset=off)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_labels, offset=loff).astype(np.int64)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels, max(n_classes, int(labels.max()) + 1 if count else n_classes))


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write uint8 images (count x rows x cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def label_entropy(dataset: Dataset, shard: Shard) -> float:
    """Shannon entropy (nats) of the label distribution inside one shard."""
    counts = np.bincount(dataset.labels[shard.indices], minlength=dataset.n_classes).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def estimate_constants(dataset: Dataset, shards, model, net, probes: int = 5, seed=0, batch_size: int = 32,
                       radius: float = 0.1) -> ConstantsEstimate:
    """Probe-based estimates of sigma_n, R and delta.

    Probe 0 is ``model`` itself; the others add seeded N(0, radius^2) noise to
    every parameter.  At each probe the full-shard gradient of every client is
    compared with the gradients of one epoch of batches of ``batch_size``.
    ``net`` supplies ``full_grad(model, X, y)`` (see :func:`full_gradient`).
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng(seed)
    weights = np.array([s.weight for s in shards])
    sigma_sq = np.zeros(len(shards))
    R_sq = 0.0
    delta = 0.0
    base = model.flat()
    for k in range(probes):
        point = model if k == 0 else model.with_flat(base + radius * rng.standard_normal(base.size))
        full = []
        for n, shard in enumerate(shards):
            g_full = full_gradient(net, point, dataset.features[shard.indices], dataset.labels[shard.indices])
            full.append(g_full)
            n_batches = max(1, len(shard) // batch_size)
            plan = make_batch_plan(shard, batch_size, n_batches, [int(seed), k, n])
            dev = []
            for idx in plan.batches:
                g = full_gradient(net, point, dataset.features[idx], dataset.labels[idx])
                dev.append(float(np.sum((g - g_full) ** 2)))
                R_sq = max(R_sq, float(np.sum(g * g)))
            sigma_sq[n] = max(sigma_sq[n], float(np.mean(dev)))
        g_global = sum(p * g for p, g in zip(weights, full))
        for g in full:
            delta = max(delta, float(np.linalg.norm(g - g_global)))
    return ConstantsEstimate(np.sqrt(sigma_sq), math.sqrt(R_sq), delta, probes)


def full_gradient(net, model, X, y) -> np.ndarray:
    """Flattened batch-mean gradient of the whole model, computed through the split hooks."""
    empty = ModelParams([], [], model.head)
    smashed, _ = net.client_forward(empty, X, y)
    _, grads, _ = net.server_grads(model, SmashedData(smashed.activations, y))
    return grads.flat()
