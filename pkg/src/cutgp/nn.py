"""Small fully connected regression network with manual backpropagation."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


class MLP:
    """tanh hidden layers, linear output, float64 throughout."""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = rng or np.random.default_rng(0)
        self.sizes = [int(s) for s in sizes]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            # Glorot uniform
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self):
        return self.weights + self.biases

    def copy(self) -> "MLP":
        out = MLP.__new__(MLP)
        out.sizes = list(self.sizes)
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
        return h

    __call__ = forward

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        """Mean squared error (averaged over batch and outputs) and gradients."""
        acts = [np.asarray(x, dtype=float)]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(np.tanh(z) if i < last else z)
        diff = acts[-1] - y
        loss = float(np.mean(diff * diff))
        delta = 2.0 * diff / diff.size
        gw = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        for i in range(last, -1, -1):
            gw[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return loss, gw + gb

    def to_json(self) -> dict:
        return {"sizes": self.sizes,
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_json(cls, doc: dict) -> "MLP":
        out = cls.__new__(cls)
        out.sizes = [int(s) for s in doc["sizes"]]
        out.weights = [np.asarray(w, dtype=float).reshape(a, b)
                       for w, a, b in zip(doc["weights"], out.sizes[:-1], out.sizes[1:])]
        out.biases = [np.asarray(b, dtype=float).reshape(-1) for b in doc["biases"]]
        return out


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
