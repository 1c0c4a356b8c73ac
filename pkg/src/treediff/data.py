"""Dataset ingestion and synthesis.

Covers IDX-format grayscale images (the MNIST container), a deterministic
synthetic clustered-image generator for fast tests, and the value-range
adapters between the [0,1] reconstruction stage and the [-1,1] denoising
stage.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Rng, SyntheticClusterSpec
from .errors import FormatError, ValidationError

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass
class ImageBatch:
    """Images shaped (N, C, H, W) with values in [0, 1], plus optional labels."""

    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 4:
            raise ValidationError(f"ImageBatch.values must be 4-d, got shape {self.values.shape}")
        if self.values.shape[1] not in (1, 3):
            raise ValidationError("ImageBatch.values must have 1 or 3 channels")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValidationError("ImageBatch.values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.values.shape[0],):
                raise ValidationError("ImageBatch.labels must have one entry per image")
            if self.labels.size and self.labels.min() < 0:
                raise ValidationError("ImageBatch.labels must be non-negative")

    def __len__(self) -> int:
        return self.values.shape[0]

    def take(self, idx: np.ndarray) -> "ImageBatch":
        labels = None if self.labels is None else self.labels[idx]
        return ImageBatch(self.values[idx], labels)


def _read_idx(path: Path, expected_magic: int, expected_dims: int) -> np.ndarray:
    data = path.read_bytes()
    header = 4 + 4 * expected_dims
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(">" + "I" * expected_dims, data[4:header])
    count = int(np.prod(dims))
    body = np.frombuffer(data, dtype=np.uint8, offset=header)
    if body.size != count:
        raise FormatError(f"{path}: IDX payload has {body.size} bytes, header promises {count}")
    return body.reshape(dims)


def load_idx_dataset(images_path: str | Path, labels_path: str | Path | None = None) -> ImageBatch:
    """Load big-endian IDX image (and optional label) files, scaled to [0, 1]."""
    raw = _read_idx(Path(images_path), _IDX_IMAGES_MAGIC, 3)
    values = (raw.astype(np.float32) / 255.0)[:, None, :, :]
    labels = None
    if labels_path is not None:
        labels = _read_idx(Path(labels_path), _IDX_LABELS_MAGIC, 1).astype(np.int64)
        if labels.shape[0] != values.shape[0]:
            raise FormatError("IDX image and label counts disagree")
    return ImageBatch(values, labels)


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    """Write uint8 images (N, H, W) to an IDX file (test fixture helper)."""
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size) - (size - 1) / 2.0) / size
    return np.meshgrid(coords, coords, indexing="ij")


def pattern_template(name: str, size: int, intensity: float = 1.0) -> np.ndarray:
    """Render one geometric pattern as a (size, size) float image in [0, 1]."""
    yy, xx = _grid(size)
    r = np.sqrt(xx**2 + yy**2)
    if name == "disk":
        img = (r < 0.30).astype(np.float32)
    elif name == "ring":
        img = ((r > 0.22) & (r < 0.38)).astype(np.float32)
    elif name == "cross":
        img = ((np.abs(xx) < 0.10) | (np.abs(yy) < 0.10)).astype(np.float32)
    elif name == "square":
        border = (np.maximum(np.abs(xx), np.abs(yy)) < 0.38) & (
            np.maximum(np.abs(xx), np.abs(yy)) > 0.22
        )
        img = border.astype(np.float32)
    elif name == "checker":
        cell = max(2, size // 4)
        ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        img = (((ii // cell) + (jj // cell)) % 2).astype(np.float32)
    elif name == "hstripes":
        ii = np.arange(size)[:, None] * np.ones((1, size))
        img = ((ii // max(2, size // 8)) % 2).astype(np.float32)
    elif name == "vstripes":
        jj = np.ones((size, 1)) * np.arange(size)[None, :]
        img = ((jj // max(2, size // 8)) % 2).astype(np.float32)
    elif name == "diag":
        img = (np.abs(xx - yy) < 0.15).astype(np.float32)
    else:
        raise ValidationError(f"unknown pattern {name!r}")
    return np.clip(img * intensity, 0.0, 1.0).astype(np.float32)


def make_synthetic(spec: SyntheticClusterSpec, rng: Rng) -> ImageBatch:
    """Generate a labeled clustered corpus: template images plus pixel noise."""
    spec.validate()
    templates = [pattern_template(p, spec.image_size, spec.intensity) for p in spec.patterns]
    for i in range(len(templates)):
        for j in range(i + 1, len(templates)):
            if np.array_equal(templates[i], templates[j]):
                raise ValidationError("synthetic templates must be pairwise distinct")
    images, labels = [], []
    for k, template in enumerate(templates):
        noise = rng.numpy.normal(0.0, spec.noise_std, size=(spec.samples_per_cluster,) + template.shape)
        block = np.clip(template[None] + noise, 0.0, 1.0)
        images.append(block.astype(np.float32))
        labels.append(np.full(spec.samples_per_cluster, k, dtype=np.int64))
    values = np.concatenate(images)[:, None, :, :]
    batch = ImageBatch(values, np.concatenate(labels))
    perm = rng.numpy.permutation(len(batch))
    return batch.take(perm)


def synthetic_templates(spec: SyntheticClusterSpec) -> np.ndarray:
    """The noiseless cluster templates, shaped (K, 1, size, size)."""
    return np.stack([pattern_template(p, spec.image_size, spec.intensity) for p in spec.patterns])[:, None]


@dataclass
class ClampTally:
    """Counts out-of-range values silently clamped by the range adapters."""

    count: int = 0


def to_diffusion_range(values: np.ndarray) -> np.ndarray:
    """Affine map [0,1] -> [-1,1]."""
    return np.asarray(values, dtype=np.float32) * 2.0 - 1.0


def from_diffusion_range(values: np.ndarray, tally: ClampTally | None = None) -> np.ndarray:
    """Inverse affine map [-1,1] -> [0,1]; out-of-range inputs clamp and count."""
    values = np.asarray(values, dtype=np.float32)
    out_of_range = int(np.count_nonzero((values < -1.0) | (values > 1.0)))
    if out_of_range and tally is not None:
        tally.count += out_of_range
    return (np.clip(values, -1.0, 1.0) + 1.0) / 2.0


def train_test_split(batch: ImageBatch, fraction: float, rng: Rng) -> tuple[ImageBatch, ImageBatch]:
    """Disjoint, exhaustive split; stratified by label when labels are present.

    ``fraction`` is the share of samples in the first (train) part.
    """
    if not 0 < fraction < 1:
        raise ValidationError("split fraction must be in (0, 1)")
    n = len(batch)
    target_train = int(round(fraction * n))
    if batch.labels is None:
        perm = rng.numpy.permutation(n)
        return batch.take(perm[:target_train]), batch.take(perm[target_train:])
    train_idx: list[np.ndarray] = []
    remainders = []
    classes = np.unique(batch.labels)
    for c in classes:
        members = np.flatnonzero(batch.labels == c)
        members = members[rng.numpy.permutation(members.size)]
        exact = fraction * members.size
        base = int(np.floor(exact))
        remainders.append((exact - base, c, members, base))
    taken = sum(r[3] for r in remainders)
    # distribute the leftover slots by largest fractional remainder
    order = sorted(remainders, key=lambda r: (-r[0], r[1]))
    extra = target_train - taken
    bump = {r[1]: 0 for r in remainders}
    for i in range(extra):
        bump[order[i % len(order)][1]] += 1
    test_idx: list[np.ndarray] = []
    for _, c, members, base in remainders:
        k = base + bump[c]
        train_idx.append(members[:k])
        test_idx.append(members[k:])
    train = np.concatenate(train_idx)
    test = np.concatenate(test_idx)
    train = train[rng.numpy.permutation(train.size)]
    test = test[rng.numpy.permutation(test.size)]
    return batch.take(train), batch.take(test)


def load_dataset(config, rng: Rng) -> tuple[ImageBatch, ImageBatch]:
    """Materialize the configured dataset and return (train, test) splits."""
    data_cfg = config.data
    if data_cfg.name == "synthetic":
        batch = make_synthetic(data_cfg.synthetic, rng.spawn("synthetic-data"))
    elif data_cfg.name == "idx":
        if not data_cfg.images_path:
            raise ValidationError("data.images_path is required for data.name=idx")
        batch = load_idx_dataset(data_cfg.images_path, data_cfg.labels_path)
    else:
        raise ValidationError(f"unknown dataset kind {data_cfg.name!r}")
    if batch.values.shape[2] != data_cfg.resolution:
        raise ValidationError(
            f"dataset resolution {batch.values.shape[2]} differs from data.resolution {data_cfg.resolution}"
        )
    if data_cfg.subset is not None and data_cfg.subset < len(batch):
        keep = rng.spawn("subset").numpy.permutation(len(batch))[: data_cfg.subset]
        batch = batch.take(np.sort(keep))
    return train_test_split(batch, 1.0 - data_cfg.test_fraction, rng.spawn("split"))
