"""Layers with explicit forward/backward passes.

Every layer caches what it needs during ``forward`` and consumes the cache in
``backward``, which returns the gradient with respect to the layer input and
accumulates parameter gradients into ``self.grads``.  Images are laid out as
``(batch, channels, height, width)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericFault(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        pass

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for name, p in self.params.items():
            g = self.grads.get(name)
            if g is None or g.shape != p.shape:
                self.grads[name] = np.zeros_like(p)
            else:
                g.fill(0)

    def spec(self) -> dict:
        return {"kind": self.kind}

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}.backward called before forward")
        return self._cache


def conv_output_size(n: int, kernel: int, stride: int, dilation: int) -> int:
    pad = dilation * (kernel - 1) // 2
    return (n + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


class Conv(Layer):
    """2D convolution with 'same' zero padding, optional stride and dilation."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, dilation: int = 1):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {kernel}")
        if stride < 1 or dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.dilation = dilation

    def init_params(self, rng, dtype):
        fan_in = self.in_channels * self.kernel * self.kernel
        w = rng.standard_normal((self.out_channels, self.in_channels, self.kernel, self.kernel))
        self.params["W"] = (w * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(self.out_channels, dtype=dtype)
        self.zero_grad()

    def _patches(self, xp: np.ndarray, ho: int, wo: int) -> np.ndarray:
        k, d, s = self.kernel, self.dilation, self.stride
        span = d * (k - 1) + 1
        win = sliding_window_view(xp, (span, span), axis=(2, 3))
        # (N, C, H', W', span, span) -> dilate, stride, crop to output size
        win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s, ::d, ::d]
        # -> (N, Ho, Wo, C, k, k)
        return win.transpose(0, 2, 3, 1, 4, 5)

    def forward(self, x, training):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"conv expects (N, {self.in_channels}, H, W), got {x.shape}")
        n, c, h, w = x.shape
        pad = self.dilation * (self.kernel - 1) // 2
        ho = conv_output_size(h, self.kernel, self.stride, self.dilation)
        wo = conv_output_size(w, self.kernel, self.stride, self.dilation)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = self._patches(xp, ho, wo).reshape(n * ho * wo, c * self.kernel * self.kernel)
        wmat = self.params["W"].reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.params["b"]
        self._cache = (x.shape, xp.shape, cols, ho, wo)
        return out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        x_shape, xp_shape, cols, ho, wo = self._need_cache()
        n, c, h, w = x_shape
        k, d, s = self.kernel, self.dilation, self.stride
        g = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_channels)
        self.grads["W"] += (g.T @ cols).reshape(self.params["W"].shape)
        self.grads["b"] += g.sum(axis=0)
        dcols = (g @ self.params["W"].reshape(self.out_channels, -1)).reshape(n, ho, wo, c, k, k)
        dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros(xp_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                r0, c0 = i * d, j * d
                dxp[:, :, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s] += dcols[..., i, j]
        pad = d * (k - 1) // 2
        return dxp[:, :, pad : pad + h, pad : pad + w]

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "dilation": self.dilation}


class FullyConnected(Layer):
    kind = "fc"

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.n_in = n_in
        self.n_out = n_out

    def init_params(self, rng, dtype):
        w = rng.standard_normal((self.n_in, self.n_out)) * np.sqrt(2.0 / self.n_in)
        self.params["W"] = w.astype(dtype)
        self.params["b"] = np.zeros(self.n_out, dtype=dtype)
        self.zero_grad()

    def forward(self, x, training):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"fc expects (N, {self.n_in}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x = self._need_cache()
        self.grads["W"] += x.T @ grad
        self.grads["b"] += grad.sum(axis=0)
        return grad @ self.params["W"].T

    def spec(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._need_cache()


class Dropout(Layer):
    """Inverted dropout; identity when not training."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(0)

    def forward(self, x, training):
        if not training or self.rate == 0.0:
            self._cache = None
            return x
        keep = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        self._cache = keep
        return x * keep

    def backward(self, grad):
        if self._cache is None:
            return grad
        return grad * self._cache

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}


class GlobalAveragePool(Layer):
    kind = "gap"

    def forward(self, x, training):
        if x.ndim != 4:
            raise ValueError(f"gap expects (N, C, H, W), got {x.shape}")
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._need_cache()
        return np.broadcast_to(grad[:, :, None, None] / (h * w), (n, c, h, w)).copy()


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        self._cache = p
        return p

    def backward(self, grad):
        p = self._need_cache()
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


LAYER_TYPES = {cls.kind: cls for cls in (Conv, FullyConnected, ReLU, Dropout, GlobalAveragePool, Softmax)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**spec)
