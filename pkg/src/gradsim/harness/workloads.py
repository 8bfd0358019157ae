"""Synthetic optimization workloads with analytic gradients.

Three kinds, all fully determined by (kind, dim, size, seed):

* ``quadratic``  f(w) = 1/2 (w - w*)' D (w - w*) with a seeded diagonal D
  (condition number <= 10) and known minimizer w*.  Per-example losses use
  targets x_e = w* + centered noise, so the example-mean gradient matches
  the analytic one and the empirical minimizer is w* itself.
* ``logistic``   binary logistic loss on strictly separable seeded data
  (margin >= 1 along a hidden direction).  No finite minimizer; used for
  descent-shape checks only.
* ``mlp``        fixed tiny regression net, input -> tanh(8) -> linear(1),
  squared error against a seeded teacher network.  Gradients by backprop.

``dim`` is the input dimension; ``param_dim`` is the optimized vector's
length (equal to dim except for the mlp).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError

HIDDEN = 8  # mlp hidden width, fixed so the architecture is part of the kind

WORKLOAD_KINDS = ("quadratic", "logistic", "mlp")


def _stable_expit(m: np.ndarray) -> np.ndarray:
    # sigmoid(m) without overflow for large |m|
    out = np.empty_like(m, dtype=np.float64)
    pos = m >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-m[pos]))
    e = np.exp(m[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class Workload:
    """Base: a dataset plus loss/gradient callables over a flat weight vector."""

    kind: str
    dim: int
    size: int
    seed: int
    param_dim: int = 0
    layers: tuple | None = None

    def loss(self, w: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def example_grad(self, w: np.ndarray, e: int) -> np.ndarray:
        raise NotImplementedError

    def grad_stack(self, w: np.ndarray, indices) -> np.ndarray:
        """Per-example gradients as a (len(indices), param_dim) stack."""
        return np.stack([self.example_grad(w, int(e) % self.size) for e in indices])

    def initial_weights(self) -> np.ndarray:
        return np.zeros(self.param_dim)


@dataclass
class QuadraticWorkload(Workload):
    curvature: np.ndarray = field(default=None, repr=False)
    minimizer: np.ndarray = field(default=None, repr=False)
    targets: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng((self.seed, 101))
        self.curvature = rng.uniform(0.1, 1.0, self.dim)
        self.minimizer = rng.standard_normal(self.dim)
        noise = 0.5 * rng.standard_normal((self.size, self.dim))
        noise -= noise.mean(axis=0)  # empirical mean target == minimizer
        self.targets = self.minimizer + noise
        self.param_dim = self.dim

    def loss(self, w):
        d = np.asarray(w, dtype=np.float64) - self.minimizer
        return 0.5 * float(d @ (self.curvature * d))

    def grad(self, w):
        return self.curvature * (np.asarray(w, dtype=np.float64) - self.minimizer)

    def example_grad(self, w, e):
        return self.curvature * (np.asarray(w, dtype=np.float64) - self.targets[e])

    def grad_stack(self, w, indices):
        idx = np.asarray(indices, dtype=np.int64) % self.size
        return self.curvature * (np.asarray(w, dtype=np.float64) - self.targets[idx])


@dataclass
class LogisticWorkload(Workload):
    features: np.ndarray = field(default=None, repr=False)
    labels: np.ndarray = field(default=None, repr=False)
    separator: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng((self.seed, 103))
        u = rng.standard_normal(self.dim)
        u /= np.linalg.norm(u)
        z = rng.standard_normal((self.size, self.dim))
        y = np.where(rng.random(self.size) < 0.5, -1.0, 1.0)
        # project out the u component, then place each point on its label's
        # side with margin >= 1: strictly separable by construction
        z -= np.outer(z @ u, u)
        offsets = 1.0 + np.abs(rng.standard_normal(self.size))
        self.features = z + np.outer(y * offsets, u)
        self.labels = y
        self.separator = u
        self.param_dim = self.dim

    def _margins(self, w):
        return self.labels * (self.features @ np.asarray(w, dtype=np.float64))

    def loss(self, w):
        return float(np.mean(np.logaddexp(0.0, -self._margins(w))))

    def grad(self, w):
        coef = -self.labels * _stable_expit(-self._margins(w))
        return (coef @ self.features) / self.size

    def example_grad(self, w, e):
        m = self.labels[e] * float(self.features[e] @ np.asarray(w, dtype=np.float64))
        return (-self.labels[e] * float(_stable_expit(np.array([-m]))[0])) * self.features[e]


@dataclass
class MlpWorkload(Workload):
    inputs: np.ndarray = field(default=None, repr=False)
    targets: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng((self.seed, 107))
        w1t = rng.standard_normal((HIDDEN, self.dim))
        b1t = rng.standard_normal(HIDDEN)
        w2t = rng.standard_normal(HIDDEN)
        b2t = float(rng.standard_normal())
        self.inputs = rng.standard_normal((self.size, self.dim))
        self.targets = np.tanh(self.inputs @ w1t.T + b1t) @ w2t + b2t
        d, h = self.dim, HIDDEN
        self.param_dim = h * d + h + h + 1
        self.layers = ((0, h * d), (h * d, h * d + h),
                       (h * d + h, h * d + 2 * h), (h * d + 2 * h, h * d + 2 * h + 1))

    def _unpack(self, w):
        d, h = self.dim, HIDDEN
        w = np.asarray(w, dtype=np.float64)
        w1 = w[: h * d].reshape(h, d)
        b1 = w[h * d: h * d + h]
        w2 = w[h * d + h: h * d + 2 * h]
        b2 = w[h * d + 2 * h]
        return w1, b1, w2, b2

    def _forward(self, w, x):
        w1, b1, w2, b2 = self._unpack(w)
        a1 = np.tanh(x @ w1.T + b1)
        return a1 @ w2 + b2, a1

    def loss(self, w):
        out, _ = self._forward(w, self.inputs)
        return 0.5 * float(np.mean((out - self.targets) ** 2))

    def _backprop(self, w, x, y):
        # x: (m, d), y: (m,); returns the mean gradient over the batch
        w1, b1, w2, b2 = self._unpack(w)
        a1 = np.tanh(x @ w1.T + b1)
        r = (a1 @ w2 + b2) - y
        m = len(y)
        dz1 = (r[:, None] * w2[None, :]) * (1.0 - a1 * a1)
        dw1 = dz1.T @ x / m
        db1 = dz1.mean(axis=0)
        dw2 = a1.T @ r / m
        db2 = r.mean()
        return np.concatenate([dw1.ravel(), db1, dw2, [db2]])

    def grad(self, w):
        return self._backprop(w, self.inputs, self.targets)

    def example_grad(self, w, e):
        return self._backprop(w, self.inputs[e:e + 1], self.targets[e:e + 1])

    def initial_weights(self):
        rng = np.random.default_rng((self.seed, 109))
        return 0.1 * rng.standard_normal(self.param_dim)


def generate_workload(kind: str, dim: int, size: int, seed: int) -> Workload:
    """Build a workload; same arguments always produce identical datasets."""
    if kind not in WORKLOAD_KINDS:
        raise ConfigError("workload.kind",
                          f"unknown kind {kind!r} (expected one of {', '.join(WORKLOAD_KINDS)})")
    if not isinstance(dim, int) or dim < 1:
        raise ConfigError("workload.dim", f"must be a positive integer, got {dim!r}")
    if not isinstance(size, int) or size < 1:
        raise ConfigError("workload.size", f"must be a positive integer, got {size!r}")
    cls = {"quadratic": QuadraticWorkload, "logistic": LogisticWorkload,
           "mlp": MlpWorkload}[kind]
    return cls(kind=kind, dim=dim, size=size, seed=int(seed))
