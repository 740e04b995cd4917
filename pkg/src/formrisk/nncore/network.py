from __future__ import annotations

import numpy as np

from .layers import Dropout, Layer, NumericFault, layer_from_spec


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericFault(f"non-finite values in {where}")
    return x


class Sequential:
    """A stack of layers trained end to end.

    ``forward`` must run with ``training=True`` before ``backward``; the
    backward pass accumulates into each layer's ``grads`` and returns the
    gradient with respect to the network input.
    """

    def __init__(self, layers: list[Layer], seed: int = 0, dtype=np.float32):
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(rng, self.dtype)
        self.reseed_dropout(seed)
        self._ran_training_forward = False

    def reseed_dropout(self, seed: int) -> None:
        rngs = np.random.SeedSequence(seed).spawn(len(self.layers))
        for layer, ss in zip(self.layers, rngs):
            if isinstance(layer, Dropout):
                layer.rng = np.random.default_rng(ss)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        for layer in self.layers:
            x = check_finite(layer.forward(x, training), f"{layer.kind} forward")
        self._ran_training_forward = training
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if not self._ran_training_forward:
            raise RuntimeError("backward requires a preceding forward pass with training=True")
        grad = np.asarray(grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            grad = check_finite(layer.backward(grad), f"{layer.kind} backward")
        return grad

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(value, gradient) pairs in a fixed order."""
        out = []
        for layer in self.layers:
            for name in sorted(layer.params):
                out.append((layer.params[name], layer.grads[name]))
        return out

    def get_state(self) -> list[np.ndarray]:
        return [p.copy() for p, _ in self.parameters()]

    def set_state(self, state: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(params) != len(state):
            raise ValueError("state does not match network parameters")
        for (p, _), s in zip(params, state):
            if p.shape != s.shape:
                raise ValueError(f"parameter shape mismatch {p.shape} vs {s.shape}")
            p[...] = s

    def specs(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    @classmethod
    def from_specs(cls, specs: list[dict], seed: int = 0, dtype=np.float32) -> "Sequential":
        return cls([layer_from_spec(s) for s in specs], seed=seed, dtype=dtype)

    def astype(self, dtype) -> "Sequential":
        """Copy of this network with parameters cast to ``dtype``."""
        clone = Sequential.from_specs(self.specs(), dtype=dtype)
        clone.set_state([s.astype(dtype) for s in self.get_state()])
        return clone


def weighted_cross_entropy(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None):
    """Mean of per-sample weighted cross-entropy and its gradient w.r.t. ``probs``.

    The mean is over the batch size, not the weight sum, so an all-zero weight
    vector yields a zero loss and zero gradient.
    """
    n = probs.shape[0]
    labels = np.asarray(labels, dtype=int)
    if weights is None:
        weights = np.ones(n, dtype=probs.dtype)
    weights = np.asarray(weights, dtype=probs.dtype)
    picked = probs[np.arange(n), labels]
    floor = np.finfo(probs.dtype).tiny
    safe = np.maximum(picked, floor)
    loss = float(np.sum(weights * -np.log(safe)) / n)
    grad = np.zeros_like(probs)
    grad[np.arange(n), labels] = -weights / (safe * n)
    return loss, grad


def mean_squared_error(pred: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None):
    """Mean over the batch of the per-sample summed squared error.

    ``weights`` is either one weight per sample or an array shaped like
    ``pred`` weighting every element.
    """
    n = pred.shape[0]
    diff = pred - target
    if weights is None:
        weights = np.ones(n, dtype=pred.dtype)
    weights = np.asarray(weights, dtype=pred.dtype)
    if weights.shape != pred.shape:
        weights = weights.reshape((n,) + (1,) * (pred.ndim - 1))
    loss = float(np.sum(weights * diff ** 2) / n)
    grad = 2.0 * diff * weights / n
    return loss, grad


def class_weights(labels: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    """Per-class weights N / (K * n_c)."""
    labels = np.asarray(labels, dtype=int)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=n_classes)
    if labels.size == 0 or np.any(counts == 0):
        raise ValueError(f"every class needs at least one sample, counts={counts.tolist()}")
    return labels.size / (n_classes * counts.astype(float))
