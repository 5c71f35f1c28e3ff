"""Feedforward encoders producing the lifted state z = [x, phi(x)].

Small fully-connected networks in plain numpy with hand-rolled
reverse-mode gradients.  Parameters are addressable both per layer and
as one flat vector; the two views are a bijection so optimizers can
work on the vector while evaluation works on the layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    # elu derivative in terms of the output: y + 1 for y < 0, else 1
    "elu": (lambda x: np.where(x > 0, x, np.expm1(x)),
            lambda y: np.where(y > 0, 1.0, y + 1.0)),
    "linear": (lambda x: x, lambda y: np.ones_like(y)),
}


@dataclass
class EncoderNetwork:
    """Fully-connected feature map phi: R^input_dim -> R^feature_dim.

    ``feature_dim == 0`` is allowed and yields the empty feature map, in
    which case lift(x) == x.
    """

    weights: list = field(default_factory=list)     # list of (W, b)
    activations: list = field(default_factory=list)  # one name per layer
    input_dim: int = 0
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.norm_mean is None:
            self.norm_mean = np.zeros(self.input_dim)
        if self.norm_std is None:
            self.norm_std = np.ones(self.input_dim)
        for name in self.activations:
            if name not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")

    @classmethod
    def create(cls, input_dim, hidden=(128, 128, 128), feature_dim=64,
               activation="tanh", seed=0):
        """Uniform fan-in initialization, W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = np.random.default_rng(seed)
        dims = [input_dim] + list(hidden) + [feature_dim]
        weights, acts = [], []
        if feature_dim == 0:
            return cls(weights=[], activations=[], input_dim=input_dim, seed=seed)
        for k in range(len(dims) - 1):
            bound = 1.0 / np.sqrt(dims[k])
            W = rng.uniform(-bound, bound, size=(dims[k], dims[k + 1]))
            b = rng.uniform(-bound, bound, size=dims[k + 1])
            weights.append((W, b))
            acts.append(activation if k < len(dims) - 2 else "linear")
        return cls(weights=weights, activations=acts, input_dim=input_dim, seed=seed)

    @property
    def feature_dim(self) -> int:
        return self.weights[-1][0].shape[1] if self.weights else 0

    @property
    def num_params(self) -> int:
        return sum(W.size + b.size for W, b in self.weights)

    def set_normalization(self, mean, std):
        std = np.asarray(std, dtype=float)
        if np.any(std <= 0):
            raise ValueError("normalization std must be strictly positive")
        self.norm_mean = np.asarray(mean, dtype=float)
        self.norm_std = std

    # --- evaluation ---

    def forward(self, x):
        """phi(x) for x of shape (..., input_dim)."""
        return self._forward_cached(np.asarray(x, dtype=float))[0]

    def _forward_cached(self, x):
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input has dimension {x.shape[-1]}, "
                             f"expected {self.input_dim}")
        if not self.weights:
            return np.zeros(x.shape[:-1] + (0,)), []
        h = (x - self.norm_mean) / self.norm_std
        cache = [h]
        for (W, b), act in zip(self.weights, self.activations):
            h = _ACTIVATIONS[act][0](h @ W + b)
            cache.append(h)
        return h, cache

    def lift(self, x):
        """Lifted state z = [x, phi(x)], shape (..., input_dim + feature_dim)."""
        x = np.asarray(x, dtype=float)
        return np.concatenate([x, self.forward(x)], axis=-1)

    @property
    def lifted_dim(self) -> int:
        return self.input_dim + self.feature_dim

    # --- reverse mode ---

    def gradient(self, x, out_adjoint):
        """Parameter gradient of a scalar loss given dL/dphi at x.

        x: (..., input_dim), out_adjoint: (..., feature_dim); leading axes
        are summed over (batch).  Returns a flat vector matching
        params_vector().
        """
        x = np.asarray(x, dtype=float)
        _, cache = self._forward_cached(x)
        grads = self._backward(cache, np.asarray(out_adjoint, dtype=float))
        return self._grads_to_vector(grads)

    def _backward(self, cache, delta):
        """Per-layer (dW, db) for an output adjoint; cache from _forward_cached."""
        grads = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            y = cache[k + 1]
            delta = delta * _ACTIVATIONS[self.activations[k]][1](y)
            h_in = cache[k]
            if delta.ndim == 1:
                dW = np.outer(h_in, delta)
                db = delta
            else:
                flat_in = h_in.reshape(-1, h_in.shape[-1])
                flat_d = delta.reshape(-1, delta.shape[-1])
                dW = flat_in.T @ flat_d
                db = flat_d.sum(axis=0)
            grads[k] = (dW, db)
            delta = delta @ self.weights[k][0].T
        return grads

    def _grads_to_vector(self, grads):
        if not grads:
            return np.zeros(0)
        return np.concatenate([np.concatenate([dW.ravel(), db.ravel()])
                               for dW, db in grads])

    # --- flat parameter view ---

    def params_vector(self) -> np.ndarray:
        if not self.weights:
            return np.zeros(0)
        return np.concatenate([np.concatenate([W.ravel(), b.ravel()])
                               for W, b in self.weights])

    def set_params_vector(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.num_params,):
            raise ValueError(f"parameter vector has {vec.shape}, "
                             f"expected ({self.num_params},)")
        offset = 0
        new_weights = []
        for W, b in self.weights:
            nW, nb = W.size, b.size
            new_W = vec[offset:offset + nW].reshape(W.shape).copy()
            offset += nW
            new_b = vec[offset:offset + nb].copy()
            offset += nb
            new_weights.append((new_W, new_b))
        self.weights = new_weights

    def copy(self) -> "EncoderNetwork":
        net = EncoderNetwork(weights=[(W.copy(), b.copy()) for W, b in self.weights],
                             activations=list(self.activations),
                             input_dim=self.input_dim,
                             norm_mean=self.norm_mean.copy(),
                             norm_std=self.norm_std.copy(),
                             seed=self.seed)
        return net

    # --- serialization ---

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layer_dims": [[int(W.shape[0]), int(W.shape[1])] for W, _ in self.weights],
            "activations": list(self.activations),
            "weights": [W.ravel().tolist() for W, _ in self.weights],
            "biases": [b.tolist() for _, b in self.weights],
            "norm_mean": self.norm_mean.tolist(),
            "norm_std": self.norm_std.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderNetwork":
        weights = []
        for dims, w_flat, b in zip(doc["layer_dims"], doc["weights"], doc["biases"]):
            W = np.asarray(w_flat, dtype=float).reshape(dims)
            weights.append((W, np.asarray(b, dtype=float)))
        return cls(weights=weights, activations=list(doc["activations"]),
                   input_dim=int(doc["input_dim"]),
                   norm_mean=np.asarray(doc["norm_mean"], dtype=float),
                   norm_std=np.asarray(doc["norm_std"], dtype=float),
                   seed=doc.get("seed"))
