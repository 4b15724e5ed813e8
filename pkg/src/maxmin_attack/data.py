"""Datasets: IDX ingestion, the synthetic desk dataset, and eval-set selection."""
from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (EvalShortfallError, IdxCountMismatchError, IdxMagicError, IdxTruncatedError,
                     SpecError)

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, values in [0, 255]
    labels: np.ndarray
    split: str = ""
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise IdxCountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 255):
            raise SpecError("pixel values must lie in [0, 255]")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclass
class EvalSet:
    dataset: Dataset
    indices: np.ndarray
    model_name: str = ""

    def __len__(self):
        return len(self.indices)

    @property
    def images(self):
        return self.dataset.images[self.indices]

    @property
    def labels(self):
        return self.dataset.labels[self.indices]


# ----------------------------------------------------------------------------
# IDX
# ----------------------------------------------------------------------------

def _read_idx(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - header} bytes, needs {count}")
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    return payload, hashlib.sha256(raw).hexdigest()[:16]


def ingest_idx(images_path, labels_path, split=""):
    """Parse an IDX image file (magic 0x803) and label file (magic 0x801)."""
    pixels, img_digest = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels, lbl_digest = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(pixels) != len(labels):
        raise IdxCountMismatchError(f"{len(pixels)} images but {len(labels)} labels")
    images = pixels.astype(np.float64)[:, None, :, :]
    return Dataset(images, labels.astype(np.int64), split, f"idx:{img_digest}:{lbl_digest}")


def write_idx_images(path, images):
    """Write an (N, H, W) or (N, 1, H, W) array of bytes as an IDX image file."""
    arr = np.asarray(images)
    if arr.ndim == 4:
        arr = arr[:, 0]
    data = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *data.shape))
        fh.write(data.tobytes())


def write_idx_labels(path, labels):
    data = np.asarray(labels).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS_MAGIC))
        fh.write(struct.pack(">I", len(data)))
        fh.write(data.tobytes())


IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_idx_dir(directory, split):
    img, lbl = IDX_FILES[split]
    return ingest_idx(os.path.join(directory, img), os.path.join(directory, lbl), split)


# ----------------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------------

def _class_templates(size=28):
    """Ten stroke patterns on a size x size canvas, values in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    r = np.hypot(yy - c, xx - c)
    t = []
    t.append(np.abs(r - 8) < 1.6)                              # ring
    t.append(np.abs(xx - c) < 1.6)                             # vertical bar
    t.append(np.abs(yy - c) < 1.6)                             # horizontal bar
    t.append(np.abs(yy - xx) < 1.8)                            # diagonal
    t.append(np.abs(yy + xx - 2 * c) < 1.8)                    # anti-diagonal
    t.append((np.abs(xx - c) < 1.6) | (np.abs(yy - c) < 1.6))  # plus
    sq = (np.maximum(np.abs(xx - c), np.abs(yy - c)))
    t.append(np.abs(sq - 7) < 1.3)                             # square outline
    t.append(r < 5)                                            # disc
    t.append((np.abs(yy - 8) < 1.6) | (np.abs(yy - 19) < 1.6))  # two bars
    t.append((np.abs(xx - 8) < 1.6) & (yy > 5) & (yy < 22)
             | (np.abs(yy - 21) < 1.6) & (xx > 7) & (xx < 21))  # L shape
    return np.stack([a.astype(np.float64) for a in t])


def synth_dataset(seed, n, classes=10, size=28, split="synth"):
    """Class-templated strokes with random jitter, contrast and additive noise.

    Labels are assigned round-robin, so class counts differ by at most one.
    """
    if classes < 1 or classes > 10:
        raise SpecError("synthetic data supports 1..10 classes")
    if n < classes:
        raise SpecError(f"need n >= classes, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    templates = _class_templates(size)
    labels = np.arange(n) % classes
    images = np.empty((n, 1, size, size))
    for i, label in enumerate(labels):
        dy, dx = rng.integers(-2, 3, size=2)
        shape = np.roll(templates[label], (dy, dx), axis=(0, 1))
        background = rng.uniform(40, 90)
        contrast = rng.uniform(40, 60)
        img = background + contrast * shape + rng.normal(0, 30, (size, size))
        images[i, 0] = np.clip(np.rint(img), 0, 255)
    return Dataset(images, labels, split, f"synth:seed={seed}:n={n}:classes={classes}")


def desk_splits(seed=0, n_train=6000, n_test=2000):
    """Train and test splits drawn from independent synthetic streams."""
    return (synth_dataset(seed * 2 + 1, n_train, split="train"),
            synth_dataset(seed * 2 + 2, n_test, split="test"))


# ----------------------------------------------------------------------------
# eval sets
# ----------------------------------------------------------------------------

def build_eval_set(dataset, model, n, strict=True):
    """First ``n`` correctly classified images, in index order.

    With ``strict=False`` a shortfall logs a warning and returns every
    correct image instead of raising.
    """
    from .zoo import predict

    if n == 0:
        return EvalSet(dataset, np.zeros(0, dtype=np.int64), model.name)
    preds = predict(model, dataset.images)[0]
    correct = np.flatnonzero(preds == dataset.labels)
    if len(correct) < n:
        if strict:
            raise EvalShortfallError(
                f"{model.name}: only {len(correct)} correctly classified images, {n} requested",
                len(correct), n)
        log.warning("%s: eval set shrunk to %d correct images (%d requested)",
                    model.name, len(correct), n)
        n = len(correct)
    return EvalSet(dataset, correct[:n], model.name)
