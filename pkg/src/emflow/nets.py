"""Small tanh MLPs with hand-written reverse-mode gradients, plus Adam.

The coupling layers only ever need 2-hidden-layer networks, so the backward
pass is spelled out directly instead of pulling in an autodiff framework.
Forward passes return an explicit cache; backward consumes it and never
touches shared state, keeping inference thread-safe.
"""

from __future__ import annotations

import numpy as np

from .exceptions import NonFiniteError


class SmallNet:
    """input -> tanh(hidden) -> tanh(hidden) -> linear output.

    The output layer starts at exactly zero so a fresh coupling layer is the
    identity map.
    """

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.n_in, self.n_hidden, self.n_out = n_in, n_hidden, n_out
        self.W1 = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_hidden))
        self.b1 = np.zeros(n_hidden)
        self.W2 = rng.normal(0.0, 1.0 / np.sqrt(n_hidden), size=(n_hidden, n_hidden))
        self.b2 = np.zeros(n_hidden)
        self.W3 = np.zeros((n_hidden, n_out))
        self.b3 = np.zeros(n_out)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2, self.W3, self.b3]

    def set_params(self, arrays) -> None:
        for own, new in zip(self.params, arrays):
            own[...] = new

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, tuple]:
        """Batched forward pass; returns (output, cache for backward)."""
        a1 = np.tanh(X @ self.W1 + self.b1)
        a2 = np.tanh(a1 @ self.W2 + self.b2)
        out = a2 @ self.W3 + self.b3
        return out, (X, a1, a2)

    def backward(self, cache, d_out: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Gradients of a scalar loss given d(loss)/d(output).

        Returns (d_input, [dW1, db1, dW2, db2, dW3, db3]).
        """
        X, a1, a2 = cache
        dW3 = a2.T @ d_out
        db3 = d_out.sum(axis=0)
        da2 = d_out @ self.W3.T
        dz2 = da2 * (1.0 - a2 * a2)
        dW2 = a1.T @ dz2
        db2 = dz2.sum(axis=0)
        da1 = dz2 @ self.W2.T
        dz1 = da1 * (1.0 - a1 * a1)
        dW1 = X.T @ dz1
        db1 = dz1.sum(axis=0)
        dX = dz1 @ self.W1.T
        return dX, [dW1, db1, dW2, db2, dW3, db3]


class Adam:
    """Adaptive-moment gradient descent over a list of parameter arrays."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = None
        self._v = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """One in-place update; parameter list order must stay fixed."""
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        if len(grads) != len(params):
            raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            if not np.isfinite(g).all():
                raise NonFiniteError("non-finite gradient in optimizer step")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
