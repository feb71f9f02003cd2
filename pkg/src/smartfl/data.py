"""Dataset loading, synthetic data, non-IID partitioning, and proxy sampling."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, InvalidArgumentError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Isotropic noise scale for synthetic class clusters.
SYNTH_NOISE_STD = 0.1


@dataclass
class Dataset:
    """Labeled examples: inputs (n x d, floats in [0,1]) and integer labels."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise InvalidArgumentError("inputs and labels row counts must agree")
        if len(self) < 1:
            raise InvalidArgumentError("dataset must contain at least one sample")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidArgumentError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class Partition:
    """Assignment of dataset indices to clients plus the server proxy set."""

    client_indices: list[np.ndarray]
    proxy_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    alpha: float = 0.0

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


@dataclass(frozen=True)
class ImbalanceSpec:
    """Proxy-set size and class skew (max class count / min class count)."""

    size: int
    degree: float = 1.0

    def __post_init__(self):
        if self.size < 1:
            raise ConfigurationError("proxy size must be positive", field="proxy.size")
        if self.degree < 1.0:
            raise ConfigurationError("imbalance degree must be >= 1", field="proxy.degree")


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}", offset + len(buf))
    return buf


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label pair (big-endian, magics 0x803/0x801).

    Pixels are scaled from bytes to [0, 1]. Image and label counts must
    agree. Malformed headers or short files raise FormatError with the
    byte offset of the problem.
    """
    with open(images_path, "rb") as f:
        header = _read_exact(f, 16, 0, "image header")
        magic, n_images, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGE_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x} in {images_path}", 0)
        pixel_bytes = _read_exact(f, n_images * rows * cols, 16, "pixel data")
    with open(labels_path, "rb") as f:
        header = _read_exact(f, 8, 0, "label header")
        magic, n_labels = struct.unpack(">II", header)
        if magic != LABEL_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x} in {labels_path}", 0)
        label_bytes = _read_exact(f, n_labels, 8, "label data")
    if n_images != n_labels:
        raise FormatError(
            f"image count {n_images} does not match label count {n_labels}", 4
        )
    inputs = np.frombuffer(pixel_bytes, dtype=np.uint8).astype(np.float64) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    return Dataset(inputs.reshape(n_images, rows * cols), labels, int(labels.max()) + 1)


def generate_synthetic(
    num_classes: int,
    per_class: int,
    input_dim: int,
    separation: float,
    rng: np.random.Generator,
) -> Dataset:
    """Gaussian-mixture classification task inside the unit cube.

    Class centers sit at 0.5 + (separation/2) * u_c for random unit
    directions u_c, so their pairwise distances scale with `separation`
    (zero separation collapses all classes onto one distribution).
    Samples get isotropic noise of std SYNTH_NOISE_STD and are clipped
    to [0, 1].
    """
    if num_classes < 1 or per_class < 1 or input_dim < 1:
        raise InvalidArgumentError("num_classes, per_class, input_dim must be positive")
    dirs = rng.normal(size=(num_classes, input_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = 0.5 + 0.5 * separation * dirs
    inputs = np.empty((num_classes * per_class, input_dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        inputs[block] = centers[c] + SYNTH_NOISE_STD * rng.normal(size=(per_class, input_dim))
        labels[block] = c
    return Dataset(np.clip(inputs, 0.0, 1.0), labels, num_classes)


def _largest_remainder(quota: np.ndarray, total: int) -> np.ndarray:
    """Round non-negative quotas to integers that sum exactly to `total`."""
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        # ties broken by lower index via stable argsort on negated remainder
        order = np.argsort(-(quota - base), kind="stable")
        base[order[:short]] += 1
    return base


def dirichlet_partition(
    dataset: Dataset,
    num_clients: int,
    alpha: float,
    rng: np.random.Generator,
    indices=None,
) -> Partition:
    """Split samples across clients with per-class Dirichlet proportions.

    For every class, proportions over the clients are drawn from
    Dirichlet(alpha, ..., alpha) and the class samples are dealt out
    accordingly, so small alpha concentrates each class on few clients.
    Clients left empty steal one sample from the currently largest
    client, keeping every client trainable.

    Args:
        dataset: source data.
        num_clients: number of shards to create.
        alpha: Dirichlet concentration (> 0).
        rng: seeded generator; the partition is a pure function of it.
        indices: optional subset of dataset indices to distribute
            (defaults to all). Returned index arrays refer to dataset
            positions, not positions within `indices`.
    """
    if num_clients < 1:
        raise ConfigurationError("need at least one client", field="clients")
    if alpha <= 0.0:
        raise ConfigurationError("alpha must be positive", field="alpha")
    pool = np.arange(len(dataset), dtype=np.int64) if indices is None else np.asarray(indices, dtype=np.int64)
    if pool.size < num_clients:
        raise ConfigurationError(
            f"{pool.size} samples cannot give {num_clients} clients one each"
        )
    labels = dataset.labels[pool]
    shards: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx_c = pool[labels == c]
        rng.shuffle(idx_c)
        share = rng.dirichlet(np.full(num_clients, alpha))
        counts = _largest_remainder(share * idx_c.size, idx_c.size)
        stop = np.cumsum(counts)
        start = stop - counts
        for m in range(num_clients):
            if counts[m]:
                shards[m].append(idx_c[start[m] : stop[m]])
    client_indices = [
        np.concatenate(parts) if parts else np.empty(0, dtype=np.int64) for parts in shards
    ]
    # repair: every client must end up non-empty
    for m in range(num_clients):
        while client_indices[m].size == 0:
            donor = int(np.argmax([ci.size for ci in client_indices]))
            if client_indices[donor].size < 2:
                raise ConfigurationError("not enough samples to populate every client")
            client_indices[m] = client_indices[donor][-1:]
            client_indices[donor] = client_indices[donor][:-1]
    return Partition(client_indices=client_indices, alpha=alpha)


def proxy_class_counts(spec: ImbalanceSpec, num_classes: int) -> np.ndarray:
    """Per-class proxy counts: geometric ramp from 1 to `degree`, rounded.

    The ramp fixes only the max/min ratio; interior classes interpolate
    geometrically, and largest-remainder rounding keeps the total exact.
    """
    if num_classes == 1:
        return np.array([spec.size], dtype=np.int64)
    weights = spec.degree ** (np.arange(num_classes) / (num_classes - 1))
    counts = _largest_remainder(spec.size * weights / weights.sum(), spec.size)
    if counts.min() < 1:
        raise ConfigurationError(
            f"imbalance degree {spec.degree} infeasible for proxy size {spec.size} "
            f"and {num_classes} classes"
        )
    return counts


def sample_proxy(
    dataset: Dataset, spec: ImbalanceSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw the server proxy set; returns (proxy indices, remainder indices)."""
    counts = proxy_class_counts(spec, dataset.num_classes)
    have = dataset.class_counts()
    chosen = []
    for c in range(dataset.num_classes):
        if counts[c] > have[c]:
            raise ConfigurationError(
                f"class {c} has {have[c]} samples, proxy needs {counts[c]}"
            )
        pool = np.nonzero(dataset.labels == c)[0]
        chosen.append(rng.choice(pool, size=counts[c], replace=False))
    proxy = np.sort(np.concatenate(chosen))
    remainder = np.setdiff1d(np.arange(len(dataset), dtype=np.int64), proxy)
    return proxy, remainder
