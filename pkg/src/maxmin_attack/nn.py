"""Dense float64 layers with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Images are
NCHW batches; a single CHW image is promoted to a batch of one where an
operation needs it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LabelError, ShapeError

DTYPE = np.float64


def as_tensor(values) -> np.ndarray:
    return np.asarray(values, dtype=DTYPE)


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------

def _conv_output_extent(size, kernel, stride):
    return (size - kernel) // stride + 1


def _check_conv_shapes(input, weights, bias, stride):
    if input.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got rank {input.ndim}", "rank")
    if weights.ndim != 4:
        raise ShapeError(f"conv2d weights must be OIHW, got rank {weights.ndim}", "rank")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}", "stride")
    n, c, h, w = input.shape
    o, i, kh, kw = weights.shape
    if c != i:
        raise ShapeError(f"input channels {c} != weight input channels {i}", "channels")
    if kh > h:
        raise ShapeError(f"kernel height {kh} exceeds input height {h}", "height")
    if kw > w:
        raise ShapeError(f"kernel width {kw} exceeds input width {w}", "width")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)", "bias")


def conv2d_forward(input, weights, bias, stride=1):
    """Valid cross-correlation: no padding, output extent floor((H-K)/stride)+1."""
    input, weights, bias = as_tensor(input), as_tensor(weights), as_tensor(bias)
    _check_conv_shapes(input, weights, bias, stride)
    kh, kw = weights.shape[2:]
    windows = sliding_window_view(input, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weights, axes=([1, 4, 5], [1, 2, 3]))
    out += bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, input, weights, stride=1):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    grad_out, input, weights = as_tensor(grad_out), as_tensor(input), as_tensor(weights)
    _check_conv_shapes(input, weights, None, stride)
    n, c, h, w = input.shape
    o, _, kh, kw = weights.shape
    ho = _conv_output_extent(h, kh, stride)
    wo = _conv_output_extent(w, kw, stride)
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, o, ho, wo)}",
                         "grad_out")
    windows = sliding_window_view(input, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    grad_weights = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_input = np.zeros_like(input)
    for ki in range(kh):
        for kj in range(kw):
            contrib = np.tensordot(grad_out, weights[:, :, ki, kj], axes=([1], [0]))
            grad_input[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                contrib.transpose(0, 3, 1, 2)
    return grad_input, grad_weights, grad_bias


# ----------------------------------------------------------------------------
# rectifier, dense, loss
# ----------------------------------------------------------------------------

def relu(input):
    input = as_tensor(input)
    return np.where(input > 0, input, 0.0)


def relu_backward(grad_out, input):
    # subgradient at exactly 0 is 0
    grad_out, input = as_tensor(grad_out), as_tensor(input)
    if grad_out.shape != input.shape:
        raise ShapeError(f"grad shape {grad_out.shape} != input shape {input.shape}", "grad_out")
    return np.where(input > 0, grad_out, 0.0)


def dense_forward(input, weights, bias):
    """``weights`` is (out, in); ``input`` is a vector or an (N, in) batch."""
    input, weights, bias = as_tensor(input), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2:
        raise ShapeError("dense weights must be a matrix", "rank")
    if input.shape[-1] != weights.shape[1]:
        raise ShapeError(f"input width {input.shape[-1]} != weight columns {weights.shape[1]}",
                         "in_features")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[0]},)", "bias")
    return input @ weights.T + bias


def dense_backward(grad_out, input, weights):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    grad_out, input, weights = as_tensor(grad_out), as_tensor(input), as_tensor(weights)
    if grad_out.shape[-1] != weights.shape[0]:
        raise ShapeError(f"grad width {grad_out.shape[-1]} != weight rows {weights.shape[0]}",
                         "out_features")
    g2 = grad_out.reshape(-1, weights.shape[0])
    x2 = input.reshape(-1, weights.shape[1])
    return grad_out @ weights, g2.T @ x2, g2.sum(axis=0)


@dataclass(frozen=True)
class LossValue:
    scalar: float
    probabilities: np.ndarray


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return shifted, e / e.sum(axis=-1, keepdims=True)


def softmax_xent_batch(logits, labels):
    """Per-row losses and probabilities for an (N, C) logit batch."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)", "labels")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"label out of range [0, {c})")
    shifted, probs = _softmax(logits)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    losses = lse - shifted[np.arange(n), labels]
    # lse >= shifted[label] mathematically; guard the last ulp
    return np.maximum(losses, 0.0), probs


def softmax_xent(logits, label) -> LossValue:
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError("softmax_xent takes a single logit vector", "rank")
    if not 0 <= int(label) < logits.shape[0]:
        raise LabelError(f"label {label} out of range [0, {logits.shape[0]})")
    losses, probs = softmax_xent_batch(logits[None], np.array([label]))
    return LossValue(float(losses[0]), probs[0])


def softmax_xent_backward(logits, labels):
    """Gradient of the per-row loss with respect to the logits: softmax - onehot."""
    logits = as_tensor(logits)
    single = logits.ndim == 1
    if single:
        logits, labels = logits[None], np.array([labels])
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise LabelError(f"label out of range [0, {logits.shape[1]})")
    _, probs = _softmax(logits)
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad[0] if single else grad


# ----------------------------------------------------------------------------
# layer objects
# ----------------------------------------------------------------------------

class Conv2D:
    kind = "conv2d"

    def __init__(self, weights, bias, stride=1):
        self.weights = as_tensor(weights)
        self.bias = as_tensor(bias)
        self.stride = int(stride)

    @property
    def params(self):
        return [self.weights, self.bias]

    def output_shape(self, shape):
        c, h, w = shape
        o, i, kh, kw = self.weights.shape
        if c != i:
            raise ShapeError(f"conv2d expects {i} channels, got {c}", "channels")
        if kh > h or kw > w:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}", "spatial")
        return (o, _conv_output_extent(h, kh, self.stride), _conv_output_extent(w, kw, self.stride))

    def forward(self, x):
        return conv2d_forward(x, self.weights, self.bias, self.stride)

    def backward(self, grad_out, x):
        gi, gw, gb = conv2d_backward(grad_out, x, self.weights, self.stride)
        return gi, [gw, gb]


class ReLU:
    kind = "relu"
    stride = 0
    params: list = []

    def output_shape(self, shape):
        return shape

    def forward(self, x):
        return relu(x)

    def backward(self, grad_out, x):
        return relu_backward(grad_out, x), []


class Dense:
    """Affine map over the flattened per-example input."""

    kind = "dense"
    stride = 0

    def __init__(self, weights, bias):
        self.weights = as_tensor(weights)
        self.bias = as_tensor(bias)

    @property
    def params(self):
        return [self.weights, self.bias]

    def output_shape(self, shape):
        if int(np.prod(shape)) != self.weights.shape[1]:
            raise ShapeError(f"dense expects {self.weights.shape[1]} inputs, got {shape}",
                             "in_features")
        return (self.weights.shape[0],)

    def forward(self, x):
        return dense_forward(x.reshape(len(x), -1), self.weights, self.bias)

    def backward(self, grad_out, x):
        gi, gw, gb = dense_backward(grad_out, x.reshape(len(x), -1), self.weights)
        return gi.reshape(x.shape), [gw, gb]


LAYER_KINDS = {"conv2d": Conv2D, "relu": ReLU, "dense": Dense}


@dataclass
class Model:
    """A fixed layer stack ending in logits; the loss head is softmax cross-entropy.

    Inputs live on the [0, 255] pixel scale and are multiplied by
    ``input_scale`` before the first layer.
    """

    name: str
    layers: list
    input_shape: tuple
    num_classes: int
    architecture: str = ""
    input_scale: float = 1.0 / 255.0
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"final layer width {shape} != num_classes {self.num_classes}",
                             "num_classes")

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def _batch(self, images):
        x = as_tensor(images)
        if x.shape == self.input_shape:
            return x[None], True
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"{self.name}: input shape {x.shape} does not match "
                             f"{self.input_shape}", "input")
        return x, False

    def _forward(self, x):
        acts = [x * self.input_scale]
        for layer in self.layers:
            acts.append(layer.forward(acts[-1]))
        return acts

    def logits(self, images):
        x, single = self._batch(images)
        out = self._forward(x)[-1]
        return out[0] if single else out

    def losses(self, images, labels):
        """Per-image cross-entropy for a batch."""
        x, single = self._batch(images)
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        losses, _ = softmax_xent_batch(self._forward(x)[-1], labels)
        return losses[0] if single else losses

    def _backward(self, acts, grad):
        param_grads = []
        for layer, a in zip(reversed(self.layers), reversed(acts[:-1])):
            grad, pg = layer.backward(grad, a)
            param_grads = pg + param_grads
        return grad * self.input_scale, param_grads

    def loss_and_input_grad(self, images, labels):
        """Per-image losses and d loss_i / d image_i for each image of the batch."""
        x, single = self._batch(images)
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        acts = self._forward(x)
        losses, _ = softmax_xent_batch(acts[-1], labels)
        grad, _ = self._backward(acts, softmax_xent_backward(acts[-1], labels))
        if single:
            return losses[0], grad[0]
        return losses, grad

    def loss_and_param_grads(self, images, labels):
        """Mean batch loss and its gradient for every parameter, in ``params`` order."""
        x, _ = self._batch(images)
        labels = np.asarray(labels, dtype=np.int64)
        acts = self._forward(x)
        losses, _ = softmax_xent_batch(acts[-1], labels)
        grad_logits = softmax_xent_backward(acts[-1], labels) / len(x)
        _, param_grads = self._backward(acts, grad_logits)
        return float(losses.mean()), param_grads


def input_gradient(model: Model, image, label):
    """Gradient of the cross-entropy loss with respect to the input pixels."""
    return model.loss_and_input_grad(image, label)[1]
