"""Desk-scale classifiers: construction, training, prediction and weight files.

Weight file layout (all integers little-endian u32 unless noted)::

    b"WGRD" | version | meta_len | meta (UTF-8 JSON) | layer_count
    per layer: kind (u8) | stride | n_params | per param: ndim | dims...
    payload: every parameter, in table order, as little-endian float64
"""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (DivergenceError, LabelError, ShapeError, SpecError, WeightFormatError,
                     WeightShapeTableError, WeightTruncatedError)
from .nn import Conv2D, Dense, Model, ReLU, softmax_xent_batch

log = logging.getLogger(__name__)

MAGIC = b"WGRD"
FORMAT_VERSION = 1
_KIND_CODES = {"conv2d": 1, "relu": 2, "dense": 3}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

# (out_channels, kernel, stride) per convolution; each conv is followed by a ReLU
ARCHITECTURES = {
    "NetA": [(8, 3, 2), (16, 3, 2)],
    "NetB": [(6, 5, 2), (12, 5, 1)],
    "NetC": [(8, 3, 1), (8, 3, 2), (16, 3, 2)],
}


def base_architecture(name):
    """``NetA_adv`` -> ``NetA``."""
    arch = name.split("_")[0]
    if arch not in ARCHITECTURES:
        raise SpecError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
    return arch


def build(architecture, input_shape=(1, 28, 28), num_classes=10, seed=0, name=None):
    """Seeded uniform init, bound sqrt(6 / fan_in); biases start at zero."""
    arch = base_architecture(architecture)
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers = []
    for out_ch, k, stride in ARCHITECTURES[arch]:
        if k > h or k > w:
            raise ShapeError(f"{arch} does not support input {tuple(input_shape)}", "spatial")
        bound = np.sqrt(6.0 / (c * k * k))
        layers.append(Conv2D(rng.uniform(-bound, bound, (out_ch, c, k, k)), np.zeros(out_ch), stride))
        layers.append(ReLU())
        c, h, w = out_ch, (h - k) // stride + 1, (w - k) // stride + 1
    fan_in = c * h * w
    bound = np.sqrt(6.0 / fan_in)
    layers.append(Dense(rng.uniform(-bound, bound, (num_classes, fan_in)), np.zeros(num_classes)))
    return Model(name or architecture, layers, tuple(input_shape), num_classes,
                 architecture=arch, training_meta={"init_seed": seed})


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    adversarial: bool = False
    # inner maximization for adversarial training: BIM
    adv_epsilon: float = 16.0
    adv_iterations: int = 5
    # share of each batch replaced by adversarial examples
    adv_fraction: float = 0.5
    # leading clean epochs before adversarial batches start
    adv_warmup_epochs: int = 3
    # learning rate once adversarial batches start
    adv_lr: float = 0.005

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise SpecError("epochs must be >= 0, batch_size and lr positive")
        if not 0 < self.adv_fraction <= 1:
            raise SpecError("adv_fraction must lie in (0, 1]")


def default_config(name, seed=0):
    """Clean models: 5 epochs. ``*_adv`` models: 3 clean + 3 adversarial epochs."""
    if name.endswith("_adv"):
        return TrainConfig(epochs=6, seed=seed, adversarial=True)
    return TrainConfig(seed=seed)


def accuracy(model, images, labels, batch_size=500):
    preds = predict(model, images, batch_size=batch_size)[0]
    return float(np.mean(preds == np.asarray(labels))) if len(preds) else 0.0


def train(model, dataset, config=None, eval_data=None):
    """Mini-batch SGD with momentum on softmax cross-entropy; mutates and returns ``model``.

    With ``config.adversarial``, after ``adv_warmup_epochs`` clean epochs the
    first ``adv_fraction`` of every shuffled batch is replaced by BIM
    adversarial examples crafted against the current parameters before the
    step (1.0 replaces the whole batch). Without the warm-up the rectifiers
    die and the model collapses to a constant prediction.
    """
    from .attacks import AttackSpec, bim

    config = config or TrainConfig()
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise LabelError(f"dataset labels must lie in [0, {model.num_classes})")
    rng = np.random.default_rng(config.seed)
    velocity = [np.zeros_like(p) for p in model.params]
    inner = AttackSpec("BIM", epsilon=config.adv_epsilon, iterations=config.adv_iterations)
    for epoch in range(config.epochs):
        adv_phase = config.adversarial and epoch >= config.adv_warmup_epochs
        lr = config.adv_lr if adv_phase else config.lr
        order = rng.permutation(len(labels))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = images[idx], labels[idx]
            if adv_phase:
                k = int(np.ceil(config.adv_fraction * len(idx)))
                x = x.copy()
                x[:k] = bim(model, x[:k], y[:k], inner).adversarial
            loss, grads = model.loss_and_param_grads(x, y)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} in epoch {epoch}", epoch)
            for p, v, g in zip(model.params, velocity, grads):
                v *= config.momentum
                v -= lr * g
                p += v
            total += loss * len(idx)
        log.info("%s epoch %d loss %.4f", model.name, epoch, total / max(len(labels), 1))
    if config.epochs:
        ref = eval_data if eval_data is not None else dataset
        model.training_meta.update(asdict(config))
        model.training_meta["clean_accuracy"] = accuracy(model, ref.images, ref.labels)
    return model


def predict(model, images, batch_size=500):
    """Argmax class (ties go to the lower index) and softmax probabilities.

    A single CHW image yields ``(int, probs)``; an NCHW batch yields arrays.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.shape == model.input_shape:
        logits = model.logits(x)[None]
        _, probs = softmax_xent_batch(logits, np.zeros(1, dtype=np.int64))
        return int(np.argmax(logits[0])), probs[0]
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match {model.input_shape}", "input")
    logits = np.concatenate([model.logits(x[i:i + batch_size])
                             for i in range(0, len(x), batch_size)]) if len(x) else \
        np.zeros((0, model.num_classes))
    _, probs = softmax_xent_batch(logits, np.zeros(len(x), dtype=np.int64))
    return np.argmax(logits, axis=1), probs


# ----------------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------------

def _shape_table(layers):
    return [(layer.kind, layer.stride, [tuple(p.shape) for p in layer.params]) for layer in layers]


def _meta(model):
    return {
        "name": model.name,
        "architecture": model.architecture,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "input_scale": model.input_scale,
        "training_meta": model.training_meta,
    }


def dumps(model) -> bytes:
    meta = json.dumps(_meta(model), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta,
             struct.pack("<I", len(model.layers))]
    for kind, stride, shapes in _shape_table(model.layers):
        parts.append(struct.pack("<BII", _KIND_CODES[kind], stride, len(shapes)))
        for shape in shapes:
            parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
    for p in model.params:
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def save(model, path):
    """Write atomically (temp file in the same directory, then rename)."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(dumps(model))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise WeightTruncatedError(
                f"weight file truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise WeightFormatError("bad magic: not a WGRD weight file")
    version, meta_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"unreadable metadata block: {exc}") from exc
    (n_layers,) = r.unpack("<I")
    table = []
    for _ in range(n_layers):
        code, stride, n_params = r.unpack("<BII")
        if code not in _CODE_KINDS:
            raise WeightShapeTableError(f"unknown layer kind code {code}")
        shapes = []
        for _ in range(n_params):
            (ndim,) = r.unpack("<I")
            shapes.append(tuple(r.unpack(f"<{ndim}I")))
        table.append((_CODE_KINDS[code], stride, shapes))

    if meta.get("architecture"):
        try:
            skeleton = build(meta["architecture"], meta["input_shape"], meta["num_classes"])
        except (SpecError, ShapeError) as exc:
            raise WeightShapeTableError(str(exc)) from exc
        if _shape_table(skeleton.layers) != table:
            raise WeightShapeTableError(
                f"shape table does not match architecture {meta['architecture']}")

    layers = []
    for kind, stride, shapes in table:
        params = []
        for shape in shapes:
            count = int(np.prod(shape))
            params.append(np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
                          .reshape(shape))
        if kind == "relu":
            layers.append(ReLU())
        elif kind == "conv2d":
            layers.append(Conv2D(params[0], params[1], stride))
        else:
            layers.append(Dense(params[0], params[1]))
    if r.pos != len(data):
        raise WeightFormatError(f"{len(data) - r.pos} trailing bytes after payload")
    try:
        return Model(meta["name"], layers, tuple(meta["input_shape"]), meta["num_classes"],
                     architecture=meta.get("architecture", ""),
                     input_scale=meta.get("input_scale", 1.0 / 255.0),
                     training_meta=meta.get("training_meta", {}))
    except ShapeError as exc:
        raise WeightShapeTableError(str(exc)) from exc


def load(path) -> Model:
    with open(path, "rb") as fh:
        return loads(fh.read())


@dataclass
class Zoo:
    """Named models; names are unique."""

    models: dict = field(default_factory=dict)

    def add(self, model):
        if model.name in self.models:
            raise SpecError(f"duplicate model name {model.name!r}")
        self.models[model.name] = model

    def __getitem__(self, name):
        return self.models[name]

    def __iter__(self):
        return iter(self.models.values())

    def __len__(self):
        return len(self.models)

    def names(self):
        return list(self.models)

    @classmethod
    def from_dir(cls, directory, names=None):
        zoo = cls()
        files = sorted(f for f in os.listdir(directory) if f.endswith(".wgrd"))
        for f in files:
            if names is None or f[:-5] in names:
                zoo.add(load(os.path.join(directory, f)))
        if names is not None:
            missing = set(names) - set(zoo.names())
            if missing:
                raise SpecError(f"models not found in {directory}: {sorted(missing)}")
            zoo.models = {n: zoo.models[n] for n in names}
        return zoo
