"""Deterministic float64 numeric substrate.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
Everything here is a pure function of its inputs except :class:`Rng`, which
wraps a counter-based Philox generator keyed by a seed and a label path.
"""
from __future__ import annotations

import zlib
from typing import Callable, Iterable

import numpy as np

from .exceptions import (
    DimensionMismatch,
    EmptyInput,
    KOutOfRange,
    NonFiniteFunction,
    NonPositiveTemperature,
    ZeroVector,
)

ZERO_NORM = 1e-30


def as_vec(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(-1)


def l2_normalize(v) -> np.ndarray:
    v = as_vec(v)
    norm = np.sqrt(np.dot(v, v))
    if not norm >= ZERO_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm!r}")
    return v / norm


def l2_normalize_rows(X) -> np.ndarray:
    """Row-wise :func:`l2_normalize` for a 2-D (or N-D, last axis) array."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.sqrt(np.sum(X * X, axis=-1, keepdims=True))
    if np.any(~(norms >= ZERO_NORM)):
        raise ZeroVector("at least one row has zero norm")
    return X / norms


def cosine_sim_matrix(X, Y) -> np.ndarray:
    """Cosine similarity between every row of ``X`` and every row of ``Y``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatch(f"dimension {X.shape[1]} vs {Y.shape[1]}")
    S = l2_normalize_rows(X) @ l2_normalize_rows(Y).T
    # rounding can push |S| a few ulps past 1
    return np.clip(S, -1.0, 1.0)


def logsumexp(values, temperature: float = 1.0) -> float:
    """Smooth maximum ``t * log(sum(exp(v / t)))``, max-shifted."""
    v = as_vec(values)
    if v.size == 0:
        raise EmptyInput("logsumexp of an empty vector")
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    m = v.max()
    return float(m + temperature * np.log(np.sum(np.exp((v - m) / temperature))))


def softmax(values, temperature: float = 1.0) -> np.ndarray:
    """Gradient of :func:`logsumexp` with respect to ``values``."""
    v = as_vec(values)
    z = np.exp((v - v.max()) / temperature)
    return z / z.sum()


def top_k_indices(values, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, descending, ties to lowest index."""
    v = as_vec(values)
    if not 1 <= k <= v.size:
        raise KOutOfRange(f"k={k} outside [1, {v.size}]")
    return np.argsort(-v, kind="stable")[:k]


def check_gradient(
    f: Callable[[np.ndarray], float],
    x,
    analytic_grad,
    step: float = 1e-6,
) -> float:
    """Max relative error between ``analytic_grad`` and central differences.

    Each entry is compared as ``|fd - g| / max(1e-8, |g|)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.asarray(analytic_grad, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteFunction(f"f is not finite around index {idx}")
        fd = (fp - fm) / (2.0 * step)
        err = abs(fd - g[idx]) / max(1e-8, abs(g[idx]))
        worst = max(worst, err)
    return worst


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


class Rng:
    """Splittable counter-based random source.

    ``Rng(seed).split("data", 3)`` always yields the same stream regardless of
    what other substreams have been drawn, so experiments can be reordered
    without changing results.
    """

    def __init__(self, seed: int, path: Iterable[int] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def split(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + tuple(_label_key(lab) for lab in labels))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"

    # thin pass-throughs used throughout the package
    def normal(self, *args, **kwargs):
        return self.generator.normal(*args, **kwargs)

    def uniform(self, *args, **kwargs):
        return self.generator.uniform(*args, **kwargs)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, *args, **kwargs):
        return self.generator.choice(*args, **kwargs)

    def integers(self, *args, **kwargs):
        return self.generator.integers(*args, **kwargs)
