"""Differentiable layers and the sequential model container.

Convolution is lowered to matrix multiplication: the input is expanded into
a redundant column matrix (one column per output position, receptive field
flattened in (channel, kernel-row, kernel-col) order) and the 4-D kernel is
reshaped to a (out_maps, in_maps*d*d) matrix.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, StateError
from ..tensor import RngStream, Tensor


def _out_hw(hw, d, stride, padding):
    h, w = hw
    oh = (h + 2 * padding - d) // stride + 1
    ow = (w + 2 * padding - d) // stride + 1
    return oh, ow


def im2col_batch(x: Tensor, d: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched lowering: (N, S, H, W) -> (S*d*d, N*H'*W')."""
    n, s, h, w = x.shape
    if h + 2 * padding < d or w + 2 * padding < d:
        raise DimensionError(
            f"kernel {d}x{d} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    oh, ow = _out_hw((h, w), d, stride, padding)
    if padding > 0:
        x = np.pad(x, [(0, 0), (0, 0), (padding, padding), (padding, padding)])
    col = np.empty((s, d, d, n, oh, ow), dtype=np.float64)
    for ki in range(d):
        for kj in range(d):
            col[:, ki, kj] = x[
                :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
            ].transpose(1, 0, 2, 3)
    return col.reshape(s * d * d, n * oh * ow)


def im2col(x: Tensor, d: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Expand one (S, H, W) input into a (S*d*d, H'*W') column matrix."""
    if x.ndim != 3:
        raise DimensionError(f"im2col expects (S, H, W) input, got {x.ndim}-D")
    return im2col_batch(x[None], d, stride, padding)


def col2im_batch(
    cols: Tensor, x_shape, d: int, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of :func:`im2col_batch`: scatter-add columns back to (N, S, H, W)."""
    n, s, h, w = x_shape
    oh, ow = _out_hw((h, w), d, stride, padding)
    col = cols.reshape(s, d, d, n, oh, ow)
    img = np.zeros((n, s, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for ki in range(d):
        for kj in range(d):
            img[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += (
                col[:, ki, kj].transpose(1, 0, 2, 3)
            )
    if padding > 0:
        img = img[:, :, padding : padding + h, padding : padding + w]
    return img


def _he_uniform(rng: RngStream, shape, fan_in: int) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


class Layer:
    """Base layer: named parameter/gradient dicts plus forward/backward."""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, Tensor] = {}

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, grad_out: Tensor) -> Tensor:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name}


class Dense(Layer):
    """Fully connected layer, weight stored as an (in, out) matrix.

    Inputs with more than 2 axes are flattened per sample, so a dense layer
    can directly follow convolution/pooling stacks.
    """

    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, name: str, rng: RngStream | None = None):
        super().__init__(name)
        self.in_dim, self.out_dim = in_dim, out_dim
        w = (
            _he_uniform(rng, (in_dim, out_dim), in_dim)
            if rng is not None
            else np.zeros((in_dim, out_dim))
        )
        self.params = {"w": w, "b": np.zeros(out_dim)}

    def forward(self, x: Tensor) -> Tensor:
        self._orig_shape = x.shape
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.in_dim:
            raise DimensionError(
                f"{self.name}: expected {self.in_dim} features, got {x.shape[1]}"
            )
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, grad_out: Tensor, compute_input_grad: bool = True) -> Tensor | None:
        self.grads["w"] = self._x.T @ grad_out
        self.grads["b"] = grad_out.sum(axis=0)
        if not compute_input_grad:
            return None
        return (grad_out @ self.params["w"].T).reshape(self._orig_shape)

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name, "in": self.in_dim, "out": self.out_dim}


class Conv2d(Layer):
    """2-D convolution via im2col, kernel stored as a (d, d, S, T) tensor."""

    kind = "conv2d"

    def __init__(
        self,
        in_maps: int,
        out_maps: int,
        d: int,
        name: str,
        stride: int = 1,
        padding: int = 0,
        rng: RngStream | None = None,
    ):
        super().__init__(name)
        self.in_maps, self.out_maps, self.d = in_maps, out_maps, d
        self.stride, self.padding = stride, padding
        fan_in = in_maps * d * d
        k = (
            _he_uniform(rng, (d, d, in_maps, out_maps), fan_in)
            if rng is not None
            else np.zeros((d, d, in_maps, out_maps))
        )
        self.params = {"k": k, "b": np.zeros(out_maps)}

    def _lowered_kernel(self) -> Tensor:
        # (d, d, S, T) -> (T, S*d*d), columns in (s, ki, kj) order to match im2col.
        return self.params["k"].transpose(3, 2, 0, 1).reshape(self.out_maps, -1)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_maps:
            raise DimensionError(
                f"{self.name}: expected (N, {self.in_maps}, H, W) input, got {x.shape}"
            )
        self._x_shape = x.shape
        n = x.shape[0]
        oh, ow = _out_hw(x.shape[2:], self.d, self.stride, self.padding)
        self._oh, self._ow = oh, ow
        self._cols = im2col_batch(x, self.d, self.stride, self.padding)
        out = self._lowered_kernel() @ self._cols + self.params["b"][:, None]
        return out.reshape(self.out_maps, n, oh, ow).transpose(1, 0, 2, 3)

    def backward(self, grad_out: Tensor, compute_input_grad: bool = True) -> Tensor | None:
        n = self._x_shape[0]
        g = grad_out.transpose(1, 0, 2, 3).reshape(self.out_maps, n * self._oh * self._ow)
        grad_lowered = g @ self._cols.T
        self.grads["k"] = (
            grad_lowered.reshape(self.out_maps, self.in_maps, self.d, self.d)
            .transpose(2, 3, 1, 0)
            .copy()
        )
        self.grads["b"] = g.sum(axis=1)
        if not compute_input_grad:
            return None
        grad_cols = self._lowered_kernel().T @ g
        return col2im_batch(grad_cols, self._x_shape, self.d, self.stride, self.padding)

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "in_maps": self.in_maps,
            "out_maps": self.out_maps,
            "d": self.d,
            "stride": self.stride,
            "padding": self.padding,
        }


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Tensor) -> Tensor:
        self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad_out: Tensor) -> Tensor:
        return grad_out * self._mask


class MaxPool(Layer):
    """Max pooling over square windows; ties go to the first window position."""

    kind = "maxpool"

    def __init__(self, window: int, stride: int, name: str):
        super().__init__(name)
        self.window, self.stride = window, stride

    def _window_views(self, x: Tensor):
        """Strided views of x, one per (ki, kj) window offset in row-major order."""
        oh, ow = self._oh, self._ow
        return [
            x[
                :, :, ki : ki + self.stride * oh : self.stride,
                kj : kj + self.stride * ow : self.stride,
            ]
            for ki in range(self.window)
            for kj in range(self.window)
        ]

    def forward(self, x: Tensor) -> Tensor:
        self._x_shape = x.shape
        self._oh, self._ow = _out_hw(x.shape[2:], self.window, self.stride, 0)
        views = self._window_views(x)
        out = views[0].copy()
        for v in views[1:]:
            np.maximum(out, v, out=out)
        self._x = x
        self._out = out
        return out

    def backward(self, grad_out: Tensor) -> Tensor:
        # route each gradient to the first window position that attained the max
        gx = np.zeros(self._x_shape, dtype=np.float64)
        unclaimed = np.ones(grad_out.shape, dtype=bool)
        for src, dst in zip(self._window_views(self._x), self._window_views(gx)):
            sel = (src == self._out) & unclaimed
            dst += grad_out * sel
            unclaimed &= ~sel
        return gx

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "window": self.window,
            "stride": self.stride,
        }


class SoftmaxCrossEntropy:
    """Mean softmax cross-entropy over a batch of logits."""

    kind = "softmax_ce"

    def forward(self, logits: Tensor, labels: np.ndarray) -> float:
        if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
            raise DimensionError(
                f"logits {logits.shape} incompatible with labels {labels.shape}"
            )
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        self._probs = exp / exp.sum(axis=1, keepdims=True)
        self._labels = labels
        n = labels.shape[0]
        logp = shifted[np.arange(n), labels] - np.log(exp.sum(axis=1))
        return float(-logp.mean())

    def backward(self) -> Tensor:
        n = self._labels.shape[0]
        grad = self._probs.copy()
        grad[np.arange(n), self._labels] -= 1.0
        return grad / n


class ModelGraph:
    """Ordered layer stack with a softmax cross-entropy head."""

    def __init__(self, layers: list[Layer], name: str = "model"):
        self.name = name
        self.layers = layers
        self.loss_head = SoftmaxCrossEntropy()
        self._forward_done = False

    def forward(self, batch: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
        x = batch
        for layer in self.layers:
            x = layer.forward(x)
        loss = self.loss_head.forward(x, labels)
        self._forward_done = True
        return loss, x

    def backward(self) -> None:
        if not self._forward_done:
            raise StateError("backward called before forward")
        grad = self.loss_head.backward()
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and isinstance(layer, (Conv2d, Dense)):
                # input gradients are never consumed below the first layer
                layer.backward(grad, compute_input_grad=False)
            else:
                grad = layer.backward(grad)

    def predict(self, batch: Tensor) -> Tensor:
        x = batch
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def named_params(self):
        """Yield (qualified name, tensor) over every trainable parameter."""
        for layer in self.layers:
            for pname, value in layer.params.items():
                yield f"{layer.name}.{pname}", value

    def named_grads(self):
        for layer in self.layers:
            for pname, value in layer.grads.items():
                yield f"{layer.name}.{pname}", value

    def weight_names(self) -> list[str]:
        """Names of weight matrices/kernels (compression targets; biases excluded)."""
        return [
            f"{layer.name}.{p}"
            for layer in self.layers
            for p in layer.params
            if p in ("w", "k")
        ]

    def get_param(self, name: str) -> Tensor:
        layer_name, pname = name.rsplit(".", 1)
        for layer in self.layers:
            if layer.name == layer_name:
                return layer.params[pname]
        raise KeyError(name)

    def set_param(self, name: str, value: Tensor) -> None:
        layer_name, pname = name.rsplit(".", 1)
        for layer in self.layers:
            if layer.name == layer_name:
                if layer.params[pname].shape != value.shape:
                    raise DimensionError(
                        f"{name}: shape {value.shape} != {layer.params[pname].shape}"
                    )
                layer.params[pname] = value
                return
        raise KeyError(name)

    def param_snapshot(self) -> dict[str, Tensor]:
        return {name: value.copy() for name, value in self.named_params()}

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]


def build_model(name: str, rng: RngStream) -> ModelGraph:
    """Construct one of the two supported MNIST architectures.

    ``lenet300``: 784-300-100-10 dense stack with ReLU.
    ``lenet5``: 20- and 50-map 5x5 convolutions with 2x2 max pooling,
    then 800-500-10 dense layers (the classic 430.5K-weight variant).
    """
    if name == "lenet300":
        layers = [
            Dense(784, 300, "fc1", rng=rng.derive(0)),
            ReLU("relu1"),
            Dense(300, 100, "fc2", rng=rng.derive(1)),
            ReLU("relu2"),
            Dense(100, 10, "fc3", rng=rng.derive(2)),
        ]
    elif name == "lenet5":
        layers = [
            Conv2d(1, 20, 5, "conv1", rng=rng.derive(0)),
            ReLU("relu1"),
            MaxPool(2, 2, "pool1"),
            Conv2d(20, 50, 5, "conv2", rng=rng.derive(1)),
            ReLU("relu2"),
            MaxPool(2, 2, "pool2"),
            Dense(800, 500, "fc1", rng=rng.derive(2)),
            ReLU("relu3"),
            Dense(500, 10, "fc2", rng=rng.derive(3)),
        ]
    else:
        raise ValueError(f"unknown model {name!r} (expected 'lenet300' or 'lenet5')")
    return ModelGraph(layers, name=name)
