"""Classifiers on [0, 1] input space: linear, Bayes-optimal for a GmmWorld, and a neural softmax net."""

from __future__ import annotations

import numpy as np

from . import nn
from .data import Dataset, GmmWorld


class Classifier:
    """Shared surface. Subclasses provide ``logits`` and ``vjp``."""

    num_classes: int

    def logits(self, x) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x, grad_logits) -> np.ndarray:
        """Pull a logit-space gradient back to the input, row by row."""
        raise NotImplementedError

    def predict(self, x) -> np.ndarray:
        # np.argmax breaks ties toward the lowest index
        return np.argmax(self.logits(x), axis=-1)

    def input_gradient(self, x, y) -> np.ndarray:
        """Gradient of CE(logits(x), y) w.r.t. x."""
        _, g = nn.cross_entropy(self.logits(x), y)
        return self.vjp(x, g)


class LinearClassifier(Classifier):
    def __init__(self, W, b):
        self.W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        self.b = np.asarray(b, dtype=np.float64).reshape(-1)
        if self.b.size != self.W.shape[0]:
            raise ValueError("bias length must equal the number of weight rows")
        self.num_classes = self.W.shape[0]

    def logits(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.W.shape[1]:
            raise ValueError(f"expected inputs of width {self.W.shape[1]}, got {x.shape}")
        return x @ self.W.T + self.b

    def vjp(self, x, grad_logits):
        return np.asarray(grad_logits) @ self.W

    @classmethod
    def binary(cls, w, b: float) -> "LinearClassifier":
        """Two-class wrapper of the half-space ``w.x + b > 0`` (class 1 on the positive side)."""
        w = np.asarray(w, dtype=np.float64)
        return cls(np.stack([np.zeros_like(w), w]), [0.0, b])


class BayesClassifier(Classifier):
    """Posterior class log-odds under an isotropic GmmWorld (clamping ignored)."""

    def __init__(self, world: GmmWorld):
        self.world = world
        self.num_classes = world.K
        self._log_priors = np.log(world.priors)

    def logits(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.world.d:
            raise ValueError(f"expected inputs of width {self.world.d}, got {x.shape}")
        sq = ((x[..., None, :] - self.world.means) ** 2).sum(-1)
        return self._log_priors - sq / (2.0 * self.world.gamma ** 2)

    def vjp(self, x, grad_logits):
        x = np.asarray(x, dtype=np.float64)
        g = np.asarray(grad_logits)
        # d logit_c / dx = (mu_c - x) / gamma^2
        return (g @ self.world.means - g.sum(-1, keepdims=True) * x) / self.world.gamma ** 2


class NeuralClassifier(Classifier):
    def __init__(self, params: nn.ModelParams):
        self.params = params
        self.num_classes = params.out_dim

    def logits(self, x):
        return nn.forward(self.params, x)

    def vjp(self, x, grad_logits):
        return nn.backward(self.params, x, grad_logits).input_grad

    def param_grads(self, x, grad_logits) -> list[np.ndarray]:
        return nn.backward(self.params, x, grad_logits).param_grads

    def parameters(self) -> list[np.ndarray]:
        return self.params.arrays()

    def copy(self) -> "NeuralClassifier":
        return NeuralClassifier(self.params.copy())

    def save(self, path) -> None:
        nn.save_params(self.params, path)

    @classmethod
    def load(cls, path) -> "NeuralClassifier":
        params, _ = nn.load_params(path)
        return cls(params)


def train_classifier(data: Dataset, num_classes: int, hidden=(64,), steps: int = 1500,
                     lr: float = 0.05, momentum: float = 0.9, batch: int = 32,
                     seed: int = 0) -> NeuralClassifier:
    """Plain minibatch CE training on clean inputs (the off-the-shelf classifier)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC1F]))
    params = nn.ModelParams.init([data.d, *hidden, num_classes], rng)
    arrays = params.arrays()
    velocity = None
    for _ in range(steps):
        idx = rng.integers(0, len(data), size=batch)
        x, y = data.X[idx], data.y[idx]
        _, g = nn.cross_entropy(nn.forward(params, x), y)
        grads = nn.backward(params, x, g / batch).param_grads
        velocity = nn.sgd_step(arrays, grads, lr, momentum, velocity)
    return NeuralClassifier(params)
