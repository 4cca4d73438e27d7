"""Layers: parameters + cached forward context + layer-local backward.

There is no autograd graph.  Each layer remembers what its last forward
call needs, and ``backward`` consumes that context, fills ``grads`` and
returns the gradient with respect to the layer input.  Composite layers
(``Sequential`` and the blocks) chain their children's backward passes in
reverse order.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T


class MissingContextError(RuntimeError):
    """Backward was requested before a matching forward call."""


class Layer:
    """Base class.  Subclasses fill ``params`` / ``buffers`` in ``__init__``."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._ctx = None

    def children(self) -> Iterator[tuple[str, "Layer"]]:
        return iter(())

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, train=False):
        return self.forward(x, train)

    def _take_ctx(self):
        if self._ctx is None:
            raise MissingContextError(
                f"{type(self).__name__}.backward called without a cached forward context"
            )
        ctx, self._ctx = self._ctx, None
        return ctx

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            if k in self.grads:
                yield prefix + k, self.grads[k]
        for name, child in self.children():
            yield from child.named_grads(f"{prefix}{name}.")

    def zero_grad(self):
        self.grads.clear()
        for _, child in self.children():
            child.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


class Sequential(Layer):
    def __init__(self, layers: list[tuple[str, Layer]]):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return iter(self.layers)

    def forward(self, x, train=False):
        for _, layer in self.layers:
            x = layer.forward(x, train)
        self._ctx = True
        return x

    def backward(self, grad):
        self._take_ctx()
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel=1, stride=1, padding=None,
                 groups=1, dtype=np.float32):
        super().__init__()
        if padding is None:
            padding = kernel // 2
        self.stride, self.padding, self.groups = stride, padding, groups
        self.params["weight"] = np.zeros(
            (out_channels, in_channels // groups, kernel, kernel), dtype=dtype
        )

    def forward(self, x, train=False):
        self._ctx = x
        return T.conv2d_forward(x, self.params["weight"], self.stride, self.padding, self.groups)

    def backward(self, grad):
        x = self._take_ctx()
        dx, dw = T.conv2d_backward(x, self.params["weight"], grad,
                                   self.stride, self.padding, self.groups)
        self.grads["weight"] = dw
        return dx


class DepthwiseConv2d(Layer):
    def __init__(self, channels, kernel=3, stride=1, padding=None, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.params["weight"] = np.zeros((channels, 1, kernel, kernel), dtype=dtype)

    def forward(self, x, train=False):
        self._ctx = x
        return T.depthwise_conv2d_forward(x, self.params["weight"], self.stride, self.padding)

    def backward(self, grad):
        x = self._take_ctx()
        dx, dw = T.depthwise_conv2d_backward(x, self.params["weight"], grad,
                                             self.stride, self.padding)
        self.grads["weight"] = dw
        return dx


class GlobalDepthwiseConv(Layer):
    def __init__(self, channels, kernel=7, dtype=np.float32):
        super().__init__()
        self.params["weight"] = np.zeros((channels, 1, kernel, kernel), dtype=dtype)

    def forward(self, x, train=False):
        self._ctx = x
        return T.global_depthwise_conv(x, self.params["weight"])

    def backward(self, grad):
        x = self._take_ctx()
        dx, dw = T.global_depthwise_conv_backward(x, self.params["weight"], grad)
        self.grads["weight"] = dw
        return dx


class BatchNorm(Layer):
    """Per-channel batch norm for (N, C) or (N, C, H, W) inputs."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        out, cache = T.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train=train, eps=self.eps, momentum=self.momentum,
        )
        self._ctx = (cache, train)
        return out

    def backward(self, grad):
        cache, train = self._take_ctx()
        dx, dg, db = T.batchnorm_backward(grad, cache, self.params["gamma"], train=train)
        self.grads["gamma"], self.grads["beta"] = dg, db
        return dx


class Activation(Layer):
    def __init__(self, kind: str, channels: int | None = None, dtype=np.float32):
        super().__init__()
        if kind not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        if kind == "prelu":
            if channels is None:
                raise ValueError("prelu needs a channel count")
            self.params["slope"] = np.full(channels, 0.25, dtype=dtype)

    def forward(self, x, train=False):
        self._ctx = x
        return T.activation(x, self.kind, self.params.get("slope"))

    def backward(self, grad):
        x = self._take_ctx()
        dx, dslope = T.activation_backward(x, grad, self.kind, self.params.get("slope"))
        if dslope is not None:
            self.grads["slope"] = dslope
        return dx


class MaxPool2d(Layer):
    def __init__(self, kernel=2):
        super().__init__()
        self.kernel = kernel

    def forward(self, x, train=False):
        self._ctx = x
        return T.max_pool2d(x, self.kernel, self.kernel)

    def backward(self, grad):
        return T.max_pool2d_backward(self._take_ctx(), grad, self.kernel, self.kernel)


class Linear(Layer):
    """Fully connected layer; accepts (N, F) or (N, F, 1, 1) and returns (N, out)."""

    def __init__(self, in_features, out_features, bias=False, dtype=np.float32):
        super().__init__()
        self.params["weight"] = np.zeros((out_features, in_features), dtype=dtype)
        if bias:
            self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def forward(self, x, train=False):
        shape = x.shape
        x2 = x.reshape(shape[0], -1)
        self._ctx = (x2, shape)
        return T.linear_forward(x2, self.params["weight"], self.params.get("bias"))

    def backward(self, grad):
        x2, shape = self._take_ctx()
        dx, dw, db = T.linear_backward(x2, self.params["weight"], grad)
        self.grads["weight"] = dw
        if "bias" in self.params:
            self.grads["bias"] = db
        return dx.reshape(shape)


def layer_backward(layer: Layer, input: np.ndarray, upstream_grad: np.ndarray):
    """Run ``layer.backward`` and collect its parameter gradients by name.

    ``input`` must be the tensor the cached forward saw; it is used only to
    sanity-check shapes.
    """
    if layer._ctx is None:
        raise MissingContextError(f"{type(layer).__name__} has no cached forward context")
    layer.zero_grad()
    dx = layer.backward(upstream_grad)
    if dx.shape != input.shape:
        raise T.ShapeError(f"input: gradient shape {dx.shape} != input shape {input.shape}")
    return dx, dict(layer.named_grads())
