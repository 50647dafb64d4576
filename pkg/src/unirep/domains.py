"""Domain descriptors, datasets, whitening, train/val splits, synthetic domains and UDRD files."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .errors import DegenerateChannelError, FormatError, GenerationError, LabelError

TRAIN, VAL = 0, 1


@dataclass
class DomainDescriptor:
    id: int
    name: str
    input_dims: tuple  # (H, W, C)
    num_classes: int
    flip_allowed: bool = True
    whitening: tuple | None = None  # (mean, std) per channel
    split_ratio: float = 0.8

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"domain {self.name!r} needs at least 2 classes, got {self.num_classes}")


@dataclass
class Dataset:
    """Images as an H x W x C x N array plus labels and a train/val assignment."""

    images: np.ndarray
    labels: np.ndarray
    descriptor: DomainDescriptor
    assignment: np.ndarray | None = None

    def __post_init__(self):
        n = self.images.shape[3]
        if self.labels.shape != (n,):
            raise ValueError(f"{n} images but labels have shape {self.labels.shape}")
        k = self.descriptor.num_classes
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= k))
        if bad.size:
            i = int(bad[0])
            raise LabelError(f"label {int(self.labels[i])} of example {i} outside [0, {k})", index=i)

    def __len__(self):
        return self.images.shape[3]

    def indices(self, split):
        if self.assignment is None:
            raise ValueError(f"dataset {self.descriptor.name!r} has no train/val split yet")
        code = {"train": TRAIN, "val": VAL}[split]
        return np.flatnonzero(self.assignment == code)

    def batch(self, idx):
        return self.images[..., idx], self.labels[idx]


# --------------------------------------------------------------------------- split / whiten


def split(dataset_or_n, ratio=0.8, seed=0):
    """Seeded uniform train/val assignment with exactly round(ratio * N) training examples."""
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    n = dataset_or_n if isinstance(dataset_or_n, (int, np.integer)) else len(dataset_or_n)
    n_train = int(round(ratio * n))
    order = np.random.default_rng(seed).permutation(n)
    assignment = np.full(n, VAL, dtype=np.uint8)
    assignment[order[:n_train]] = TRAIN
    return assignment


def channel_stats(images):
    x = images.astype(np.float64)
    mean = x.mean(axis=(0, 1, 3))
    std = x.std(axis=(0, 1, 3))
    return mean, std


def whiten(dataset):
    """Standardize each channel with statistics read from the training split only."""
    train_idx = dataset.indices("train")
    mean, std = channel_stats(dataset.images[..., train_idx])
    bad = np.flatnonzero(~(std > 1e-12))
    if bad.size:
        raise DegenerateChannelError(f"channel {int(bad[0])} of {dataset.descriptor.name!r} has zero variance")
    images = ((dataset.images - mean[None, None, :, None]) / std[None, None, :, None]).astype(dataset.images.dtype)
    desc = replace(dataset.descriptor, whitening=(mean, std))
    return Dataset(images, dataset.labels, desc, dataset.assignment), (mean, std)


# --------------------------------------------------------------------------- synthetic domains


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    n_per_class: int = 100
    image_size: int = 16
    channels: int = 3
    mean_offset: float = 0.0
    variance_scale: float = 1.0
    margin: float = 8.0
    noise_std: float = 1.0
    seed: int = 0
    # class geometry is drawn from its own seed so that ``seed`` only changes samples
    geometry_seed: int = 0
    style: str = "object"  # "object": mirror-symmetric prototypes; "glyph": asymmetric, no flips
    grid: int = 4
    name: str = ""

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.variance_scale <= 0:
            raise ValueError("variance scale must be positive")
        if self.style not in ("object", "glyph"):
            raise ValueError(f"style must be 'object' or 'glyph', got {self.style!r}")

    @property
    def flip_allowed(self):
        return self.style == "object"


def _low_frequency(rng, count, size, channels, grid, symmetric):
    coarse = rng.standard_normal((count, grid, grid, channels))
    if symmetric:
        coarse = 0.5 * (coarse + coarse[:, :, ::-1, :])
    fields = zoom(coarse, (1, size / grid, size / grid, 1), order=1, mode="nearest")
    fields -= fields.mean(axis=(1, 2), keepdims=True)
    return fields


def class_prototypes(spec, attempts=200):
    """K prototypes with unit per-pixel RMS and pairwise distances of at least ``margin``."""
    n_dims = spec.image_size ** 2 * spec.channels
    radius = np.sqrt(n_dims)
    if spec.margin > 2 * radius:
        raise GenerationError(f"margin {spec.margin} exceeds the diameter {2 * radius:.2f} of the prototype sphere")
    rng = np.random.default_rng([spec.geometry_seed, 7919])
    for _ in range(attempts):
        protos = _low_frequency(rng, spec.num_classes, spec.image_size, spec.channels, spec.grid,
                                symmetric=spec.style == "object")
        norms = np.sqrt((protos ** 2).sum(axis=(1, 2, 3), keepdims=True))
        protos *= radius / norms
        flat = protos.reshape(spec.num_classes, -1)
        d2 = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
        d2[np.diag_indices(spec.num_classes)] = np.inf
        if np.sqrt(d2.min()) >= spec.margin:
            return protos
    raise GenerationError(
        f"could not place {spec.num_classes} prototypes {spec.margin} apart in {n_dims} dims after {attempts} draws"
    )


def generate_synthetic(spec, domain_id=1):
    """Render a labelled domain: prototype + low-frequency nuisance + pixel noise, then a channel shift."""
    protos = class_prototypes(spec)
    k, n = spec.num_classes, spec.n_per_class
    rng = np.random.default_rng([spec.seed, 104729])
    # interleave classes so that contiguous batches in dataset order are class-mixed
    labels = rng.permutation(np.repeat(np.arange(k), n))
    x = protos[labels]
    if spec.noise_std > 0:
        nuisance = _low_frequency(rng, k * n, spec.image_size, spec.channels, spec.grid,
                                  symmetric=spec.style == "object")
        nuisance /= nuisance.std(axis=(1, 2, 3), keepdims=True)
        x = x + spec.noise_std * (nuisance + rng.standard_normal(x.shape))
    x = spec.mean_offset + np.sqrt(spec.variance_scale) * x
    images = np.ascontiguousarray(x.transpose(1, 2, 3, 0)).astype(np.float32)
    desc = DomainDescriptor(
        id=domain_id,
        name=spec.name or f"synth{domain_id}",
        input_dims=(spec.image_size, spec.image_size, spec.channels),
        num_classes=k,
        flip_allowed=spec.flip_allowed,
    )
    return Dataset(images, labels.astype(np.int64), desc)


# --------------------------------------------------------------------------- UDRD binary format

MAGIC = b"UDRD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII?3x")


def save_binary(dataset, path):
    """Write ``dataset`` as a little-endian UDRD file (instance-major pixels, then labels)."""
    h, w, c, n = dataset.images.shape
    d = dataset.descriptor
    pixels = np.ascontiguousarray(dataset.images.transpose(3, 0, 1, 2), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, h, w, c, d.num_classes, bool(d.flip_allowed)))
        fh.write(pixels.tobytes())
        fh.write(np.asarray(dataset.labels, dtype="<u4").tobytes())


def load_binary(path, domain_id=1, name=None, to_rgb=False):
    """Parse a UDRD file; every defect raises :class:`FormatError` with the byte offset."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise FormatError("bad magic bytes", offset=0)
        raise FormatError(f"truncated header: missing byte at offset {len(raw)}", offset=len(raw))
    magic, version, n, h, w, c, k, flip = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic bytes {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if min(h, w, c) < 1:
        raise FormatError(f"invalid dims {h}x{w}x{c}", offset=12)
    if k < 2:
        raise FormatError(f"class count {k} < 2", offset=24)
    pix_bytes = 4 * n * h * w * c
    expected = _HEADER.size + pix_bytes + 4 * n
    if len(raw) < expected:
        raise FormatError(
            f"truncated file: {len(raw)} bytes, expected {expected}; missing byte at offset {len(raw)}",
            offset=len(raw),
        )
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after the label block", offset=expected)
    pixels = np.frombuffer(raw, dtype="<f4", count=n * h * w * c, offset=_HEADER.size)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=_HEADER.size + pix_bytes)
    over = np.flatnonzero(labels >= k)
    if over.size:
        i = int(over[0])
        off = _HEADER.size + pix_bytes + 4 * i
        raise FormatError(f"record {i}: label {int(labels[i])} >= K={k}", offset=off, record=i)
    images = pixels.reshape(n, h, w, c).transpose(1, 2, 3, 0).astype(np.float32)
    if to_rgb and c == 1:
        images = np.repeat(images, 3, axis=2)
        c = 3
    desc = DomainDescriptor(
        id=domain_id,
        name=name or Path(path).stem,
        input_dims=(h, w, c),
        num_classes=int(k),
        flip_allowed=bool(flip),
    )
    return Dataset(np.ascontiguousarray(images), labels.astype(np.int64), desc)
