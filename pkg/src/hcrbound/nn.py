"""Feed-forward layer zoo with matrix-free input Jacobian products.

Every layer works on a leading batch axis: ``forward`` maps ``(B, *in_shape)``
to ``(B, *out_shape)`` and returns a context holding whatever the layer needs
to differentiate at that point.  ``tangent`` pushes an input perturbation
forward (Jacobian times vector) and ``backward`` pulls an output cotangent back
(Jacobian transpose times vector), optionally with parameter gradients for
training.

Conventions fixed here because the layers are only piecewise differentiable:
the ReLU derivative at exactly zero is zero, and max-pooling ties route to the
first maximal entry of the window in row-major order.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, RngStream, sample_uniform

AFFINE, RELU, FLATTEN, SOFTMAX, CONV2D, MAXPOOL2D = range(6)

MAGIC = b"HCRW1"


class ShapeError(ValueError):
    pass


class WeightFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# layers


class Layer:
    kind: int

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def params(self) -> list[np.ndarray]:
        return []

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        if values:
            raise ValueError(f"{type(self).__name__} has no parameters")

    def forward(self, x):
        raise NotImplementedError

    def tangent(self, ctx, dx):
        raise NotImplementedError

    def backward(self, ctx, dy, param_grads: bool = False):
        raise NotImplementedError


@dataclass(eq=False)
class Affine(Layer):
    """``y = x @ weight + bias`` with ``weight`` of shape (in_dim, out_dim)."""

    weight: np.ndarray
    bias: np.ndarray
    kind = AFFINE

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"affine weight {self.weight.shape} incompatible with bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError(f"affine layer expects ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def params(self):
        return [self.weight, self.bias]

    def set_params(self, values):
        self.weight, self.bias = values

    def forward(self, x):
        return x @ self.weight + self.bias, x

    def tangent(self, ctx, dx):
        return dx @ self.weight

    def backward(self, ctx, dy, param_grads=False):
        dx = dy @ self.weight.T
        if not param_grads:
            return dx, None
        return dx, [ctx.T @ dy, dy.sum(axis=0)]


class ReLU(Layer):
    kind = RELU

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def tangent(self, mask, dx):
        return np.where(mask, dx, 0.0)

    def backward(self, mask, dy, param_grads=False):
        return np.where(mask, dy, 0.0), ([] if param_grads else None)


class Flatten(Layer):
    kind = FLATTEN

    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def tangent(self, in_shape, dx):
        return dx.reshape(dx.shape[0], -1)

    def backward(self, in_shape, dy, param_grads=False):
        return dy.reshape(in_shape), ([] if param_grads else None)


class Softmax(Layer):
    kind = SOFTMAX

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"softmax expects a vector input, got {tuple(in_shape)}")
        return in_shape

    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def tangent(self, y, dx):
        return y * (dx - np.sum(y * dx, axis=-1, keepdims=True))

    def backward(self, y, dy, param_grads=False):
        # the softmax Jacobian is symmetric
        return self.tangent(y, dy), ([] if param_grads else None)


def _pool_out(size: int, kernel: int, stride: int, pad: int = 0) -> int:
    return (size + 2 * pad - kernel) // stride + 1


@dataclass(eq=False)
class Conv2D(Layer):
    """Cross-correlation of (C, H, W) inputs with (O, C, kh, kw) kernels."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    kind = CONV2D

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv weight {self.weight.shape} incompatible with bias {self.bias.shape}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("conv stride must be >= 1 and padding >= 0")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(
                f"conv expects ({self.in_channels}, H, W), got {tuple(in_shape)}"
            )
        kh, kw = self.kernel
        ho = _pool_out(in_shape[1], kh, self.stride, self.padding)
        wo = _pool_out(in_shape[2], kw, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv kernel {self.kernel} larger than input {tuple(in_shape)}")
        return (self.out_channels, ho, wo)

    def params(self):
        return [self.weight, self.bias]

    def set_params(self, values):
        self.weight, self.bias = values

    def _windows(self, x):
        p = self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, self.kernel, axis=(2, 3))
        return win[:, :, :: self.stride, :: self.stride]

    def _correlate(self, x):
        return np.einsum("bchwij,ocij->bohw", self._windows(x), self.weight, optimize=True)

    def forward(self, x):
        return self._correlate(x) + self.bias[None, :, None, None], x

    def tangent(self, ctx, dx):
        return self._correlate(dx)

    def backward(self, x, dy, param_grads=False):
        b, c, h, w = x.shape
        p, s = self.padding, self.stride
        kh, kw = self.kernel
        ho, wo = dy.shape[2], dy.shape[3]
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.einsum(
                    "bohw,oc->bchw", dy, self.weight[:, :, i, j], optimize=True
                )
        dx = dxp[:, :, p : p + h, p : p + w]
        if not param_grads:
            return dx, None
        dw = np.einsum("bchwij,bohw->ocij", self._windows(x), dy, optimize=True)
        return dx, [dw, dy.sum(axis=(0, 2, 3))]


@dataclass(eq=False)
class MaxPool2D(Layer):
    kernel_h: int
    kernel_w: int
    stride_h: int | None = None
    stride_w: int | None = None
    kind = MAXPOOL2D

    def __post_init__(self):
        if self.stride_h is None:
            self.stride_h = self.kernel_h
        if self.stride_w is None:
            self.stride_w = self.kernel_w
        if min(self.kernel_h, self.kernel_w, self.stride_h, self.stride_w) < 1:
            raise ShapeError("pooling kernel and stride must be positive")

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"max-pool expects (C, H, W), got {tuple(in_shape)}")
        ho = _pool_out(in_shape[1], self.kernel_h, self.stride_h)
        wo = _pool_out(in_shape[2], self.kernel_w, self.stride_w)
        if ho < 1 or wo < 1:
            raise ShapeError("pooling kernel larger than input")
        return (in_shape[0], ho, wo)

    def _windows(self, x):
        win = sliding_window_view(x, (self.kernel_h, self.kernel_w), axis=(2, 3))
        win = win[:, :, :: self.stride_h, :: self.stride_w]
        return win.reshape(win.shape[:4] + (-1,))

    def forward(self, x):
        win = self._windows(x)
        # argmax returns the first maximum, i.e. row-major tie-breaking
        arg = win.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def tangent(self, ctx, dx):
        _, arg = ctx
        win = self._windows(dx)
        idx = np.broadcast_to(arg[..., None], win.shape[:-1] + (1,))
        return np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(self, ctx, dy, param_grads=False):
        shape, arg = ctx
        b, c, ho, wo = arg.shape
        rows = np.arange(ho)[:, None] * self.stride_h + arg // self.kernel_w
        cols = np.arange(wo)[None, :] * self.stride_w + arg % self.kernel_w
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        dx = np.zeros(shape, dtype=DTYPE)
        np.add.at(dx, (bi, ci, rows, cols), dy)
        return dx, ([] if param_grads else None)


# --------------------------------------------------------------------------
# networks


@dataclass(eq=False)
class Network:
    """A chain of layers applied to inputs of a fixed shape."""

    layers: list[Layer]
    input_shape: tuple[int, ...]
    shapes: list[tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        shapes = [self.input_shape]
        for idx, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {idx} ({type(layer).__name__}): {exc}") from None
        self.shapes = shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    @property
    def input_size(self) -> int:
        return math.prod(self.input_shape)

    @property
    def output_size(self) -> int:
        return math.prod(self.output_shape)

    def _as_input(self, x: np.ndarray) -> np.ndarray:
        if x.shape == self.input_shape:
            return x
        if x.size == self.input_size:
            return x.reshape(self.input_shape)
        raise ShapeError(f"expected input of shape {self.input_shape}, got {x.shape}")

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected batch of {self.input_shape}, got {x.shape}")
        for layer in self.layers:
            x, _ = layer.forward(x)
        return x

    def forward(self, theta: np.ndarray) -> np.ndarray:
        theta = self._as_input(np.asarray(theta, dtype=DTYPE))
        return self.forward_batch(theta[None])[0]

    def linearize(self, theta: np.ndarray) -> "Linearization":
        return Linearization(self, theta)


class Linearization:
    """A network frozen at one input: the primal pass runs once, here.

    ``jvp`` and ``vjp`` then reuse the stored per-layer contexts, so repeated
    Jacobian products (as LSQR needs) cost no further primal evaluations.
    """

    def __init__(self, net: Network, theta: np.ndarray):
        self.net = net
        self.theta = net._as_input(np.asarray(theta, dtype=DTYPE))
        x = self.theta[None]
        self.contexts = []
        for layer in net.layers:
            x, ctx = layer.forward(x)
            self.contexts.append(ctx)
        self.output = x[0]

    @property
    def rows(self) -> int:
        return self.net.output_size

    @property
    def cols(self) -> int:
        return self.net.input_size

    def jvp(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=DTYPE)
        if v.size != self.net.input_size:
            raise ShapeError(f"tangent of size {v.size}, input has {self.net.input_size}")
        dx = v.reshape((1,) + self.net.input_shape)
        for layer, ctx in zip(self.net.layers, self.contexts):
            dx = layer.tangent(ctx, dx)
        return dx[0]

    def jvp_batch(self, vs: np.ndarray) -> np.ndarray:
        """Jacobian applied to each row of ``vs``, shape ``(B, *output_shape)``."""
        vs = np.asarray(vs, dtype=DTYPE)
        dx = vs.reshape((vs.shape[0],) + self.net.input_shape)
        for layer, ctx in zip(self.net.layers, self.contexts):
            dx = layer.tangent(ctx, dx)
        return dx

    def vjp(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=DTYPE)
        if u.size != self.net.output_size:
            raise ShapeError(f"cotangent of size {u.size}, output has {self.net.output_size}")
        dy = u.reshape((1,) + self.net.output_shape)
        for layer, ctx in zip(reversed(self.net.layers), reversed(self.contexts)):
            dy, _ = layer.backward(ctx, dy)
        return dy[0]


def forward(net: Network, theta: np.ndarray) -> np.ndarray:
    return net.forward(theta)


def jvp(net: Network, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Jacobian of ``net`` at ``theta`` applied to ``v`` (forward mode).

    The tangent is carried alongside the primal, layer by layer.
    """
    theta = net._as_input(np.asarray(theta, dtype=DTYPE))
    v = np.asarray(v, dtype=DTYPE)
    if v.size != theta.size:
        raise ShapeError(f"tangent shape {v.shape} does not match input {theta.shape}")
    x, dx = theta[None], v.reshape(theta.shape)[None]
    for layer in net.layers:
        x, ctx = layer.forward(x)
        dx = layer.tangent(ctx, dx)
    return dx[0]


def vjp(net: Network, theta: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Transposed Jacobian of ``net`` at ``theta`` applied to ``u`` (reverse mode)."""
    return net.linearize(theta).vjp(u)


@dataclass(eq=False)
class Model(Network):
    """A network split into a feature extractor and a classifier.

    ``feature_boundary`` is the index of the first classifier layer.
    """

    feature_boundary: int = 0

    def __post_init__(self):
        super().__post_init__()
        if not 0 < self.feature_boundary <= len(self.layers):
            raise ShapeError(f"feature boundary {self.feature_boundary} out of range")
        if any(isinstance(layer, Softmax) for layer in self.layers[: self.feature_boundary]):
            raise ShapeError("softmax is only allowed in the classifier")

    @property
    def features(self) -> Network:
        return Network(self.layers[: self.feature_boundary], self.input_shape)

    @property
    def classifier(self) -> Network:
        return Network(
            self.layers[self.feature_boundary :], self.shapes[self.feature_boundary]
        )

    @property
    def feature_size(self) -> int:
        return math.prod(self.shapes[self.feature_boundary])


def classify(model: Model, features: np.ndarray) -> int | np.ndarray:
    """Class index from features; ties go to the lowest index.

    Accepts one feature vector or a batch of them.
    """
    features = np.asarray(features, dtype=DTYPE)
    fshape = model.shapes[model.feature_boundary]
    if features.shape == fshape:
        return int(np.argmax(model.classifier.forward(features)))
    if features.shape[1:] != fshape:
        raise ShapeError(f"features of shape {features.shape}, classifier expects {fshape}")
    return np.argmax(model.classifier.forward_batch(features), axis=-1)


# --------------------------------------------------------------------------
# architectures and initialisation


def init_uniform(model: Network, rng: RngStream) -> Network:
    """Fill every parameter uniformly in +-1/sqrt(fan_in), in place."""
    for idx, layer in enumerate(model.layers):
        if not layer.params():
            continue
        w = layer.params()[0]
        fan_in = w.shape[0] if isinstance(layer, Affine) else math.prod(w.shape[1:])
        bound = 1.0 / math.sqrt(fan_in)
        sub = rng.substream((rng.stream_id << 8) + idx)
        values, offset = [], 0
        for p in layer.params():
            u = sample_uniform(sub.advanced(offset), p.shape)
            offset += p.size
            values.append((2.0 * u - 1.0) * bound)
        layer.set_params(values)
    return model


def mnist_mlp(rng: RngStream | None = None, width: int = 784, classes: int = 10) -> Model:
    """Flatten, two Affine+ReLU blocks as features, then Affine+Softmax."""
    n = 28 * 28
    layers = [
        Flatten(),
        Affine(np.zeros((n, width)), np.zeros(width)),
        ReLU(),
        Affine(np.zeros((width, width)), np.zeros(width)),
        ReLU(),
        Affine(np.zeros((width, classes)), np.zeros(classes)),
        Softmax(),
    ]
    model = Model(layers, (1, 28, 28), feature_boundary=5)
    if rng is not None:
        init_uniform(model, rng)
    return model


def cifar_convnet(rng: RngStream | None = None, classes: int = 10) -> Model:
    """Convolutional feature extractor for 3x32x32 images, 3072 features.

    Expressible only; there is no CIFAR ingestion in this package.
    """

    def blank(*shape):
        # read-only zero views; init_uniform swaps in real arrays
        return np.broadcast_to(np.zeros((), dtype=DTYPE), shape)

    def conv(cin, cout, k):
        return Conv2D(blank(cout, cin, k, k), blank(cout))

    layers = [
        conv(3, 32, 3), ReLU(), MaxPool2D(2, 2),
        conv(32, 1024, 5), ReLU(), MaxPool2D(3, 3),
        conv(1024, 3072, 3), ReLU(),
        Flatten(),
        Affine(blank(3072, 3072), blank(3072)), ReLU(),
        Affine(blank(3072, classes), blank(classes)), Softmax(),
    ]
    model = Model(layers, (3, 32, 32), feature_boundary=11)
    if rng is not None:
        init_uniform(model, rng)
    return model


# --------------------------------------------------------------------------
# HCRW1 weight files


def _layer_header(layer: Layer, in_shape) -> tuple[list[int], list[np.ndarray]]:
    if isinstance(layer, Affine):
        return [layer.in_dim, layer.out_dim], [layer.weight, layer.bias]
    if isinstance(layer, Conv2D):
        kh, kw = layer.kernel
        dims = [layer.in_channels, layer.out_channels, kh, kw, layer.stride, layer.padding]
        return dims, [layer.weight, layer.bias]
    if isinstance(layer, MaxPool2D):
        return [layer.kernel_h, layer.kernel_w, layer.stride_h, layer.stride_w], []
    # parameterless layers record the shape they consume
    return list(in_shape), []


def save_weights(model: Network, path) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(model.layers))
    for layer, in_shape in zip(model.layers, model.shapes):
        dims, payload = _layer_header(layer, in_shape)
        out += struct.pack("<BI", layer.kind, len(dims))
        out += struct.pack(f"<{len(dims)}I", *dims)
        for arr in payload:
            out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError(
                f"truncated weight file: needed {n} bytes for {what} at offset {self.pos}, "
                f"{len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def floats(self, shape, what):
        count = math.prod(shape)
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(shape)


def _read_layer(r: _Reader, idx: int) -> tuple[Layer, tuple[int, ...] | None]:
    kind, ndims = struct.unpack("<BI", r.take(5, f"layer {idx} header"))
    dims = struct.unpack(f"<{ndims}I", r.take(4 * ndims, f"layer {idx} shape"))

    def need(count):
        if ndims != count:
            raise WeightFormatError(f"layer {idx}: expected {count} shape integers, got {ndims}")

    if kind == AFFINE:
        need(2)
        w = r.floats(dims, f"layer {idx} weights")
        b = r.floats((dims[1],), f"layer {idx} bias")
        return Affine(w, b), (dims[0],)
    if kind == CONV2D:
        need(6)
        cin, cout, kh, kw, stride, pad = dims
        w = r.floats((cout, cin, kh, kw), f"layer {idx} weights")
        b = r.floats((cout,), f"layer {idx} bias")
        return Conv2D(w, b, stride=stride, padding=pad), None
    if kind == MAXPOOL2D:
        need(4)
        return MaxPool2D(*dims), None
    if kind in (RELU, FLATTEN, SOFTMAX):
        layer = {RELU: ReLU, FLATTEN: Flatten, SOFTMAX: Softmax}[kind]()
        return layer, tuple(dims) if dims else None
    raise WeightFormatError(f"layer {idx}: unknown layer kind tag {kind}")


def _default_boundary(layers: list[Layer]) -> int:
    affine = [i for i, layer in enumerate(layers) if isinstance(layer, Affine)]
    if not affine:
        raise WeightFormatError("cannot infer feature boundary without an affine classifier")
    return affine[-1]


def load_weights(path, input_shape=None, feature_boundary: int | None = None) -> Model:
    """Read an HCRW1 file.

    The input shape is taken from the first layer when it records one
    (affine and parameterless layers do); convolutional models need it
    passed in.  By default the classifier starts at the last affine layer.
    """
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise WeightFormatError(f"{path}: bad magic, not an HCRW1 weight file")
    (count,) = struct.unpack("<I", r.take(4, "layer count"))
    layers, recorded = [], []
    for idx in range(count):
        layer, shape = _read_layer(r, idx)
        layers.append(layer)
        recorded.append(shape)
    if r.pos != len(data):
        raise WeightFormatError(f"{len(data) - r.pos} trailing bytes after last layer")
    if input_shape is None:
        if not recorded or recorded[0] is None:
            raise WeightFormatError("input shape not recorded; pass input_shape")
        input_shape = recorded[0]
    boundary = _default_boundary(layers) if feature_boundary is None else feature_boundary
    try:
        model = Model(layers, tuple(input_shape), feature_boundary=boundary)
    except ShapeError as exc:
        raise WeightFormatError(f"inconsistent layer shapes: {exc}") from None
    for idx, (shape, actual) in enumerate(zip(recorded, model.shapes)):
        if shape is not None and tuple(shape) != tuple(actual):
            raise WeightFormatError(
                f"layer {idx} records input shape {shape} but receives {actual}"
            )
    return model
