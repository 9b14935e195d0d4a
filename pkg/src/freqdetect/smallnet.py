"""A small numpy CNN with named activations, input gradients and SGD training.

Everything runs in float64 on batches shaped ``(B, C, H, W)``. Single-image
helpers (:func:`net_forward`, :func:`net_input_gradient`) wrap the batched
methods of :class:`Network`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArchitectureError, DataError, NumericError

LAYER_KINDS = ("normalize", "conv", "relu", "avgpool", "gap", "dense")
DEFAULT_LR = 0.01
DEFAULT_EPOCHS = 30
DEFAULT_BATCH = 4
NET_MAGIC = b"SSNET1"


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str
    out: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0

    def to_dict(self):
        d = {"kind": self.kind, "name": self.name}
        if self.kind in ("conv", "dense"):
            d["out"] = self.out
        if self.kind in ("conv", "avgpool"):
            d.update(kernel=self.kernel, stride=self.stride)
        if self.kind == "conv":
            d["pad"] = self.pad
        return d


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class Architecture:
    """Layer list plus input shape; validates shape compatibility on creation.

    The final layer must be ``dense`` with ``out == classes``; softmax and
    cross-entropy are applied on top of it implicitly.
    """

    input_shape: tuple
    classes: int
    layers: tuple
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", tuple(self._infer_shapes()))

    def _infer_shapes(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ArchitectureError(f"input shape must be (C, H, W) with positive dims, got {self.input_shape}")
        if self.classes < 2:
            raise ArchitectureError("need at least 2 classes")
        if not self.layers:
            raise ArchitectureError("architecture has no layers")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ArchitectureError(f"duplicate layer names in {names}")
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ArchitectureError(f"layer '{layer.name}': unknown kind '{layer.kind}'")
            if layer.kind in ("conv", "avgpool", "gap") and len(shape) != 3:
                raise ArchitectureError(f"layer '{layer.name}' needs a (C, H, W) input, got {shape}")
            if layer.kind == "conv":
                if layer.out < 1 or layer.kernel < 1 or layer.stride < 1 or layer.pad < 0:
                    raise ArchitectureError(f"layer '{layer.name}': invalid conv parameters")
                h = conv_output_size(shape[1], layer.kernel, layer.stride, layer.pad)
                w = conv_output_size(shape[2], layer.kernel, layer.stride, layer.pad)
                if h < 1 or w < 1:
                    raise ArchitectureError(f"layer '{layer.name}': kernel {layer.kernel} does not fit input {shape}")
                shape = (layer.out, h, w)
            elif layer.kind == "avgpool":
                if layer.kernel < 1 or layer.stride < 1:
                    raise ArchitectureError(f"layer '{layer.name}': invalid pool parameters")
                h = conv_output_size(shape[1], layer.kernel, layer.stride, 0)
                w = conv_output_size(shape[2], layer.kernel, layer.stride, 0)
                if h < 1 or w < 1:
                    raise ArchitectureError(f"layer '{layer.name}': pool {layer.kernel} does not fit input {shape}")
                shape = (shape[0], h, w)
            elif layer.kind == "gap":
                shape = (shape[0],)
            elif layer.kind == "dense":
                if layer.out < 1:
                    raise ArchitectureError(f"layer '{layer.name}': invalid dense width")
                shape = (layer.out,)
            shapes.append(shape)
        last = self.layers[-1]
        if last.kind != "dense" or last.out != self.classes:
            raise ArchitectureError(
                f"layer '{last.name}': final layer must be dense with {self.classes} outputs")
        return shapes

    @property
    def layer_names(self):
        return [layer.name for layer in self.layers]

    def input_shape_of(self, index):
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def param_shapes(self):
        """(weight, bias) shapes in layer order, for conv and dense layers only."""
        out = []
        for i, layer in enumerate(self.layers):
            in_shape = self.input_shape_of(i)
            if layer.kind == "conv":
                out.append((layer.out, in_shape[0], layer.kernel, layer.kernel))
                out.append((layer.out,))
            elif layer.kind == "dense":
                out.append((layer.out, int(np.prod(in_shape))))
                out.append((layer.out,))
        return out

    def param_count(self):
        return sum(int(np.prod(s)) for s in self.param_shapes())

    def descriptor(self):
        return json.dumps(
            {"input": list(self.input_shape), "classes": self.classes,
             "layers": [layer.to_dict() for layer in self.layers]},
            separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_descriptor(cls, text):
        d = json.loads(text)
        layers = [Layer(**layer) for layer in d["layers"]]
        return cls(tuple(d["input"]), int(d["classes"]), tuple(layers))


def default_architecture(classes=2, input_shape=(3, 32, 32)):
    return Architecture(input_shape, classes, (
        Layer("normalize", "input"),
        Layer("conv", "conv1", out=16, kernel=3, stride=1, pad=1),
        Layer("relu", "relu1"),
        Layer("conv", "conv2", out=32, kernel=3, stride=2, pad=1),
        Layer("relu", "relu2"),
        Layer("conv", "conv3", out=32, kernel=3, stride=1, pad=1),
        Layer("relu", "relu3"),
        Layer("gap", "pool"),
        Layer("dense", "fc", out=classes),
    ))


# -- layer primitives ---------------------------------------------------------

def _im2col(x, k, s, p):
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def _conv_forward(x, w, b, layer):
    cols, ho, wo = _im2col(x, layer.kernel, layer.stride, layer.pad)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    out = out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_backward(dout, x_shape, cols, w, layer, need_params):
    bsz, c, h, wd = x_shape
    k, s, p = layer.kernel, layer.stride, layer.pad
    n_out, ho, wo = dout.shape[1:]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, n_out)
    dw = db = None
    if need_params:
        dw = (d2.T @ cols).reshape(w.shape)
        db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(n_out, -1)).reshape(bsz, ho, wo, c, k, k)
    dx = np.zeros((bsz, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if p:
        dx = dx[:, :, p:p + h, p:p + wd]
    return dx, dw, db


def _avgpool_forward(x, layer):
    k, s = layer.kernel, layer.stride
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return win.mean(axis=(4, 5))


def _avgpool_backward(dout, x_shape, layer):
    k, s = layer.kernel, layer.stride
    ho, wo = dout.shape[2:]
    dx = np.zeros(x_shape)
    g = dout / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += g
    return dx


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(np.atleast_2d(z)))


class Network:
    """Parameters bound to an :class:`Architecture`.

    Instances are treated as immutable: training returns a new network.
    """

    def __init__(self, arch, params):
        shapes = arch.param_shapes()
        if len(params) != len(shapes):
            raise ArchitectureError(f"expected {len(shapes)} parameter arrays, got {len(params)}")
        checked = []
        for shape, p in zip(shapes, params):
            p = np.asarray(p, dtype=np.float64)
            if p.shape != tuple(shape):
                raise ArchitectureError(f"parameter shape {p.shape} does not match {shape}")
            checked.append(p)
        self.arch = arch
        self.params = checked
        self.loss_history = ()

    @classmethod
    def initialize(cls, arch, seed=0):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = []
        for shape in arch.param_shapes():
            if len(shape) == 1:
                params.append(np.zeros(shape))
                continue
            receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
            s = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-s, s, size=shape))
        return cls(arch, params)

    @classmethod
    def zeros(cls, arch):
        return cls(arch, [np.zeros(s) for s in arch.param_shapes()])

    @property
    def layer_names(self):
        return self.arch.layer_names

    @property
    def classes(self):
        return self.arch.classes

    def spatial_layers(self):
        """Names of layers whose output is a stack of 2D maps."""
        return [l.name for l, s in zip(self.arch.layers, self.arch.shapes) if len(s) == 3]

    def with_params(self, params):
        return Network(self.arch, [np.array(p, copy=True) for p in params])

    def _layer_params(self):
        it = iter(self.params)
        return [(next(it), next(it)) if layer.kind in ("conv", "dense") else None
                for layer in self.arch.layers]

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.arch.input_shape:
            first = self.arch.layers[0].name
            raise ArchitectureError(
                f"input shape {x.shape[1:] if x.ndim == 4 else x.shape} does not match layer "
                f"'{first}' expecting {self.arch.input_shape}")
        return x

    def _check_capture(self, capture):
        capture = list(capture)
        unknown = [c for c in capture if c not in self.layer_names]
        if unknown:
            raise ArchitectureError(f"unknown layer(s) {unknown}; valid names: {self.layer_names}")
        return set(capture)

    def _forward(self, x, capture=frozenset(), keep_cache=False):
        caches = []
        trace = {}
        for layer, p in zip(self.arch.layers, self._layer_params()):
            x_in = x
            cache = None
            if layer.kind == "normalize":
                x = (x - 0.5) * 2.0
            elif layer.kind == "conv":
                x, cache = _conv_forward(x, p[0], p[1], layer)
            elif layer.kind == "relu":
                x = np.maximum(x, 0.0)
            elif layer.kind == "avgpool":
                x = _avgpool_forward(x, layer)
            elif layer.kind == "gap":
                x = x.mean(axis=(2, 3))
            elif layer.kind == "dense":
                x = x.reshape(x.shape[0], -1) @ p[0].T + p[1]
            if keep_cache:
                caches.append((x_in, cache))
            if layer.name in capture:
                trace[layer.name] = x
        return x, trace, caches

    def _backward(self, dz, caches, need_params):
        grads = []
        dx = dz
        for layer, p, (x_in, cache) in zip(reversed(self.arch.layers), reversed(self._layer_params()),
                                            reversed(caches)):
            if layer.kind == "normalize":
                dx = dx * 2.0
            elif layer.kind == "conv":
                dx, dw, db = _conv_backward(dx, x_in.shape, cache, p[0], layer, need_params)
                grads.append((dw, db))
            elif layer.kind == "relu":
                dx = dx * (x_in > 0)
            elif layer.kind == "avgpool":
                dx = _avgpool_backward(dx, x_in.shape, layer)
            elif layer.kind == "gap":
                h, w = x_in.shape[2:]
                dx = np.broadcast_to(dx[:, :, None, None] / (h * w), x_in.shape).copy()
            elif layer.kind == "dense":
                x2 = x_in.reshape(x_in.shape[0], -1)
                if need_params:
                    grads.append((dx.T @ x2, dx.sum(axis=0)))
                dx = (dx @ p[0]).reshape(x_in.shape)
        flat = []
        for dw, db in reversed(grads):
            flat.extend([dw, db])
        return dx, flat

    def forward(self, x, capture=()):
        """Batched forward pass. Returns ``(logits, trace)``."""
        x = self._check_input(x)
        cap = self._check_capture(capture)
        logits, trace, _ = self._forward(x, cap)
        return logits, trace

    def logits(self, x):
        return self.forward(x)[0]

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)

    def _check_labels(self, labels, n):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise DataError(f"{labels.shape[0]} labels for {n} images")
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise DataError(f"label out of range [0, {self.classes})")
        return labels

    def loss_and_input_grad(self, x, labels, return_logits=False):
        """Per-sample cross-entropy losses and their gradients w.r.t. the input.

        With ``return_logits`` the logits of the same pass are returned third.
        """
        x = self._check_input(x)
        labels = self._check_labels(labels, x.shape[0])
        z, _, caches = self._forward(x, keep_cache=True)
        logp = log_softmax(z)
        idx = np.arange(len(labels))
        losses = -logp[idx, labels]
        dz = np.exp(logp)
        dz[idx, labels] -= 1.0
        dx, _ = self._backward(dz, caches, need_params=False)
        if return_logits:
            return losses, dx, z
        return losses, dx

    def loss_and_param_grads(self, x, labels):
        """Mean cross-entropy over the batch and its parameter gradients."""
        x = self._check_input(x)
        labels = self._check_labels(labels, x.shape[0])
        z, _, caches = self._forward(x, keep_cache=True)
        logp = log_softmax(z)
        idx = np.arange(len(labels))
        n = len(labels)
        dz = np.exp(logp)
        dz[idx, labels] -= 1.0
        _, grads = self._backward(dz / n, caches, need_params=True)
        return float(-logp[idx, labels].mean()), grads

    def mean_loss(self, x, labels, batch=256):
        x = self._check_input(x)
        labels = self._check_labels(labels, x.shape[0])
        total = 0.0
        for i in range(0, len(x), batch):
            logp = log_softmax(self.logits(x[i:i + batch]))
            total += -logp[np.arange(len(logp)), labels[i:i + batch]].sum()
        return total / len(x)

    def accuracy(self, x, labels, batch=256):
        preds = np.concatenate([self.predict(x[i:i + batch]) for i in range(0, len(x), batch)])
        return float(np.mean(preds == np.asarray(labels)))

    # -- serialization --------------------------------------------------------

    def to_bytes(self):
        desc = self.arch.descriptor().encode("utf-8")
        body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.params)
        return NET_MAGIC + struct.pack("<I", len(desc)) + desc + b"\n" + body

    @classmethod
    def from_bytes(cls, data):
        if data[:6] != NET_MAGIC:
            raise DataError("not a network file (bad magic)")
        (n,) = struct.unpack_from("<I", data, 6)
        desc = data[10:10 + n].decode("utf-8")
        if data[10 + n:11 + n] != b"\n":
            raise DataError("malformed architecture line")
        arch = Architecture.from_descriptor(desc)
        pos = 11 + n
        params = []
        for shape in arch.param_shapes():
            count = int(np.prod(shape))
            if pos + 8 * count > len(data):
                raise DataError("network file truncated")
            params.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy())
            pos += 8 * count
        if pos != len(data):
            raise DataError(f"{len(data) - pos} trailing bytes in network file")
        return cls(arch, params)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def net_forward(net, image, capture=()):
    """Logits and captured activations for a single ``(C, H, W)`` image."""
    image = np.asarray(image, dtype=np.float64)
    logits, trace = net.forward(image[None], capture)
    return logits[0], {k: v[0] for k, v in trace.items()}


def net_input_gradient(net, image, label):
    """d(cross-entropy)/d(image) for one image."""
    image = np.asarray(image, dtype=np.float64)
    if not 0 <= int(label) < net.classes:
        raise DataError(f"label {label} out of range [0, {net.classes})")
    _, grad = net.loss_and_input_grad(image[None], [label])
    return grad[0]


def net_train(net, dataset, epochs=DEFAULT_EPOCHS, lr=DEFAULT_LR, seed=0, batch_size=DEFAULT_BATCH):
    """Minibatch SGD on softmax cross-entropy; returns a new network.

    The training-set loss after each epoch is stored in ``loss_history``.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(images) == 0:
        raise DataError("cannot train on an empty dataset")
    if net.classes < 2:
        raise DataError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    params = [p.copy() for p in net.params]
    current = Network(net.arch, params)  # shares arrays with ``params``
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            loss, grads = current.loss_and_param_grads(images[idx], labels[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss during epoch {epoch}")
            for p, g in zip(params, grads):
                p -= lr * g
        epoch_loss = current.mean_loss(images, labels)
        if not np.isfinite(epoch_loss) or not all(np.isfinite(p).all() for p in params):
            raise NumericError(f"non-finite loss or parameters after epoch {epoch}")
        history.append(epoch_loss)
    trained = net.with_params(params)
    trained.loss_history = tuple(history)
    return trained
