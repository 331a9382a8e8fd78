"""A small numpy convolutional network trained with plain SGD.

Tensors are NCHW.  Every convolutional and connected layer owns exactly
five parameter buffers, in this order::

    weights, biases, scales, rolling_mean, rolling_variance

Batch normalization (when enabled) normalizes with batch statistics during
training and with the rolling statistics at inference; the rolling
statistics are updated with momentum 0.99.  They do not enter the training
loss, so their gradients are identically zero.  Without batch
normalization the scale/mean/variance buffers still exist (ones, zeros,
ones) and are unused.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .netconfig import ConnectedSpec, ConvSpec, MaxPoolSpec, NetConfig, SoftmaxSpec

LEAKY_SLOPE = 0.1
BN_MOMENTUM = 0.99
BN_EPS = 1e-5
BUFFER_NAMES = ("weights", "biases", "scales", "rolling_mean", "rolling_variance")


class ShapeError(ValueError):
    pass


def _activate(y, kind):
    if kind == "leaky":
        return np.where(y > 0, y, y * y.dtype.type(LEAKY_SLOPE))
    if kind == "relu":
        return np.maximum(y, 0)
    return y


def _activation_grad(y, kind):
    if kind == "leaky":
        return np.where(y > 0, y.dtype.type(1), y.dtype.type(LEAKY_SLOPE))
    if kind == "relu":
        return (y > 0).astype(y.dtype)
    return np.ones_like(y)


@dataclass
class Batch:
    inputs: np.ndarray  # (batch, input_dim)
    labels: np.ndarray  # (batch, classes), one-hot

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 2:
            raise ShapeError("inputs and labels must be 2-D")
        if len(self.inputs) != len(self.labels):
            raise ShapeError("inputs and labels disagree on batch size")
        if not np.allclose(self.labels.sum(axis=1), 1.0):
            raise ShapeError("label rows must sum to 1")

    def __len__(self):
        return len(self.inputs)

    @classmethod
    def from_indices(cls, inputs, labels, classes: int) -> "Batch":
        onehot = np.zeros((len(labels), classes), dtype=np.float32)
        onehot[np.arange(len(labels)), labels] = 1
        return cls(np.asarray(inputs, dtype=np.float32).reshape(len(labels), -1), onehot)


class Layer:
    kind = ""

    def __init__(self, in_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = self.in_shape
        self.params: list = []
        self.grads: list = []

    def forward(self, x, train, update_stats):
        raise NotImplementedError

    def backward(self, delta):
        raise NotImplementedError


class _Normalized(Layer):
    """Shared affine + batch-norm + activation tail for conv/connected."""

    def _init_params(self, rng, w_shape, fan_in, n_out, dtype):
        bound = np.sqrt(2.0 / fan_in)
        w = rng.uniform(-bound, bound, size=w_shape)
        self.params = [
            w.astype(dtype),
            np.zeros(n_out, dtype),
            np.ones(n_out, dtype),
            np.zeros(n_out, dtype),
            np.ones(n_out, dtype),
        ]
        self.grads = [np.zeros_like(p) for p in self.params]

    def _tail_forward(self, z, train, update_stats):
        _, b, scale, rmean, rvar = self.params
        self._train = train
        if self.batch_normalize:
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    m = z.dtype.type(BN_MOMENTUM)
                    rmean *= m
                    rmean += (1 - m) * mu
                    rvar *= m
                    rvar += (1 - m) * var
            else:
                mu, var = rmean, rvar
            self._inv_std = 1.0 / np.sqrt(var + z.dtype.type(BN_EPS))
            self._xhat = (z - mu) * self._inv_std
            y = scale * self._xhat + b
        else:
            y = z + b
        self._y = y
        return _activate(y, self.activation)

    def _tail_backward(self, d):
        _, _, scale, _, _ = self.params
        dy = d * _activation_grad(self._y, self.activation)
        self.grads[1] += dy.sum(axis=0)
        if not self.batch_normalize:
            return dy
        self.grads[2] += (dy * self._xhat).sum(axis=0)
        dxhat = dy * scale
        if not self._train:
            return dxhat * self._inv_std
        m = dy.shape[0]
        return (self._inv_std / m) * (
            m * dxhat - dxhat.sum(axis=0) - self._xhat * (dxhat * self._xhat).sum(axis=0)
        )


class ConvLayer(_Normalized):
    kind = "convolutional"

    def __init__(self, in_shape, spec: ConvSpec, rng, dtype):
        super().__init__(in_shape)
        c, h, w = self.in_shape
        self.filters, self.size, self.stride, self.pad = spec.filters, spec.size, spec.stride, spec.pad
        self.activation, self.batch_normalize = spec.activation, spec.batch_normalize
        ho = (h + 2 * self.pad - self.size) // self.stride + 1
        wo = (w + 2 * self.pad - self.size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"convolution {spec} does not fit input {self.in_shape}")
        self.out_shape = (self.filters, ho, wo)
        fan_in = c * self.size * self.size
        self._init_params(rng, (self.filters, c, self.size, self.size), fan_in, self.filters, dtype)

    def forward(self, x, train, update_stats):
        n = x.shape[0]
        p, k, s = self.pad, self.size, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self._padded_shape = x.shape
        f, ho, wo = self.out_shape
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        self._cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        z = self._cols @ self.params[0].reshape(f, -1).T
        a = self._tail_forward(z, train, update_stats)
        return a.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(self, delta):
        n = delta.shape[0]
        f, ho, wo = self.out_shape
        c = self.in_shape[0]
        k, s, p = self.size, self.stride, self.pad
        d = delta.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        dz = self._tail_backward(d)
        w = self.params[0]
        self.grads[0] += (dz.T @ self._cols).reshape(w.shape)
        dcols = (dz @ w.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
        dx = np.zeros(self._padded_shape, dtype=delta.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return dx


class ConnectedLayer(_Normalized):
    kind = "connected"

    def __init__(self, in_shape, spec: ConnectedSpec, rng, dtype):
        super().__init__(in_shape)
        self.activation, self.batch_normalize = spec.activation, spec.batch_normalize
        fan_in = int(np.prod(self.in_shape))
        self.out_shape = (spec.outputs,)
        self._init_params(rng, (spec.outputs, fan_in), fan_in, spec.outputs, dtype)

    def forward(self, x, train, update_stats):
        self._x = x.reshape(x.shape[0], -1)
        z = self._x @ self.params[0].T
        return self._tail_forward(z, train, update_stats)

    def backward(self, delta):
        dz = self._tail_backward(delta)
        self.grads[0] += dz.T @ self._x
        return (dz @ self.params[0]).reshape((delta.shape[0],) + self.in_shape)


class MaxPoolLayer(Layer):
    kind = "maxpool"

    def __init__(self, in_shape, spec: MaxPoolSpec):
        super().__init__(in_shape)
        c, h, w = self.in_shape
        self.size, self.stride = spec.size, spec.stride
        ho = (h - self.size) // self.stride + 1
        wo = (w - self.size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"maxpool {spec} does not fit input {self.in_shape}")
        self.out_shape = (c, ho, wo)

    def forward(self, x, train, update_stats):
        k, s = self.size, self.stride
        _, ho, wo = self.out_shape
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = win.reshape(win.shape[:4] + (k * k,))
        self._arg = flat.argmax(axis=-1)
        self._x_shape = x.shape
        return np.take_along_axis(flat, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, delta):
        n, c, ho, wo = delta.shape
        k, s = self.size, self.stride
        dx = np.zeros(self._x_shape, dtype=delta.dtype)
        nn_, cc, oh, ow = np.indices((n, c, ho, wo))
        rows = oh * s + self._arg // k
        cols = ow * s + self._arg % k
        np.add.at(dx, (nn_, cc, rows, cols), delta)
        return dx


class SoftmaxLayer(Layer):
    kind = "softmax"

    def __init__(self, in_shape):
        super().__init__(in_shape)
        self.out_shape = (int(np.prod(self.in_shape)),)

    def forward(self, x, train, update_stats):
        z = x.reshape(x.shape[0], -1)
        self._logits = z
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def backward(self, delta):
        # ``delta`` is already d(loss)/d(logits); see Model.backward.
        return delta.reshape((delta.shape[0],) + self.in_shape)


class Model:
    def __init__(self, layers, input_shape, dtype):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self._cache: Optional[tuple] = None

    @property
    def numL(self) -> int:
        return len(self.layers)

    @property
    def classes(self) -> int:
        return self.layers[-1].out_shape[0]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def param_layers(self):
        return [layer for layer in self.layers if layer.params]

    def parameters(self) -> list:
        """Flat list of every parameter buffer, in layer order."""
        return [p for layer in self.layers for p in layer.params]

    def parameter_bytes(self) -> int:
        return sum(p.nbytes for p in self.parameters())

    def _inputs(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1:] != (self.input_dim,) and x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match {self.input_shape}")
        return x.reshape((x.shape[0],) + self.input_shape)

    def run(self, x, train=False, update_stats=False):
        out = self._inputs(x)
        for layer in self.layers:
            out = layer.forward(out, train, update_stats)
        return out

    def forward(self, batch: Batch, train=True, update_stats=True):
        """Softmax outputs and mean cross-entropy loss."""
        if batch.labels.shape[1] != self.classes:
            raise ShapeError(f"labels have {batch.labels.shape[1]} classes, model {self.classes}")
        probs = self.run(batch.inputs, train, update_stats)
        labels = batch.labels.astype(self.dtype)
        logits = self.layers[-1]._logits
        zmax = logits.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
        loss = float(np.mean(lse - (labels * logits).sum(axis=1)))
        self._cache = (probs, labels, train)
        return probs, loss

    def backward(self, batch: Optional[Batch] = None) -> list:
        if self._cache is None:
            raise RuntimeError("backward() called before forward()")
        probs, labels, train = self._cache
        if not train:
            raise RuntimeError("backward() needs a training-mode forward()")
        delta = (probs - labels) / self.dtype.type(len(probs))
        for layer in reversed(self.layers):
            delta = layer.backward(delta)
        self._cache = None
        return [g for layer in self.layers for g in layer.grads]

    def zero_grads(self):
        for layer in self.layers:
            for g in layer.grads:
                g.fill(0)


def build_model(cfg: NetConfig, rng_seed: int, input_shape=None, dtype=np.float32) -> Model:
    shape = tuple(input_shape) if input_shape is not None else cfg.input_shape
    if shape is None:
        raise ShapeError("input shape missing: set height/width/channels in [net]")
    if len(shape) == 1:
        shape = (shape[0], 1, 1)
    rng = np.random.default_rng(rng_seed)
    layers = []
    cur = shape
    for spec in cfg.layers:
        if isinstance(spec, ConvSpec):
            if len(cur) != 3:
                raise ShapeError("convolutional layer needs a C x H x W input")
            layer = ConvLayer(cur, spec, rng, dtype)
        elif isinstance(spec, MaxPoolSpec):
            if len(cur) != 3:
                raise ShapeError("maxpool layer needs a C x H x W input")
            layer = MaxPoolLayer(cur, spec)
        elif isinstance(spec, ConnectedSpec):
            layer = ConnectedLayer(cur, spec, rng, dtype)
        elif isinstance(spec, SoftmaxSpec):
            layer = SoftmaxLayer(cur)
        else:
            raise TypeError(f"unknown layer spec {spec!r}")
        layers.append(layer)
        cur = layer.out_shape
    return Model(layers, shape, dtype)


def forward(m: Model, batch: Batch):
    return m.forward(batch)


def backward(m: Model, batch: Batch) -> list:
    return m.backward(batch)


def sgd_update(m: Model, lr: float) -> None:
    step = m.dtype.type(lr)
    for layer in m.layers:
        for p, g in zip(layer.params, layer.grads):
            p -= step * g
            g.fill(0)


def train_iteration(m: Model, batch: Batch, lr: float) -> float:
    _, loss = m.forward(batch)
    m.backward(batch)
    sgd_update(m, lr)
    return loss


def predict(m: Model, inputs):
    """Argmax class per input (ties go to the lowest index).  A single
    1-D input returns an ``int``."""
    single = np.ndim(inputs) == 1
    probs = m.run(inputs, train=False)
    classes = probs.argmax(axis=1)
    return int(classes[0]) if single else classes


def accuracy(m: Model, inputs, labels, chunk: int = 1000) -> float:
    hits = 0
    for i in range(0, len(labels), chunk):
        hits += int((predict(m, inputs[i : i + chunk]) == labels[i : i + chunk]).sum())
    return hits / len(labels)
