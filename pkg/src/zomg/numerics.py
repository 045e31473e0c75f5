"""Dense float64 kernels shared by every other module.

Stable softmax, L2 normalization, small dot/matvec helpers, input
validation, and a reproducible counter-based RNG. Everything operates on
plain numpy arrays in 64-bit precision and is pure: inputs are never
mutated by any public operation.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVectorError, InvalidInputError, ShapeError

NORM_EPS = 1e-12


def require_finite(a: np.ndarray, name: str = "input") -> None:
    """Raise InvalidInputError if `a` contains NaN or Inf."""
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    require_finite(v, name)
    return v


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    require_finite(m, name)
    return m


def softmax(x, axis: int = -1) -> np.ndarray:
    """Softmax along `axis`, stabilized by subtracting the maximum.

    Entries sum to 1 along `axis`; individual entries may underflow to
    exactly 0.0 for very large gaps, but never overflow.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        raise ShapeError("softmax input must be non-empty")
    require_finite(a, "softmax input")
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def logsumexp(x) -> float:
    v = as_vector(x, "logsumexp input")
    hi = float(np.max(v))
    return hi + float(np.log(np.sum(np.exp(v - hi))))


def l2_normalize(v) -> np.ndarray:
    """Scale `v` to unit Euclidean norm; near-zero vectors are rejected."""
    vec = as_vector(v, "l2_normalize input")
    n = float(np.linalg.norm(vec))
    if n <= NORM_EPS:
        raise DegenerateVectorError(f"cannot normalize vector with norm {n:.3e}")
    return vec / n


def dot(a, b) -> float:
    va = as_vector(a, "dot lhs")
    vb = as_vector(b, "dot rhs")
    if va.shape != vb.shape:
        raise ShapeError(f"dot shape mismatch: {va.shape} vs {vb.shape}")
    return float(va @ vb)


def matvec(m, v) -> np.ndarray:
    mm = as_matrix(m, "matvec matrix")
    vv = as_vector(v, "matvec vector")
    if mm.shape[1] != vv.shape[0]:
        raise ShapeError(f"matvec shape mismatch: {mm.shape} vs {vv.shape}")
    return mm @ vv


def axpy(a: float, x, y) -> np.ndarray:
    """a * x + y, elementwise."""
    vx = as_vector(x, "axpy x")
    vy = as_vector(y, "axpy y")
    if vx.shape != vy.shape:
        raise ShapeError(f"axpy shape mismatch: {vx.shape} vs {vy.shape}")
    return a * vx + vy


class Rng:
    """Deterministic random stream with platform-independent output.

    Backed by the counter-based Philox4x64-10 bit generator (seeded through
    numpy's SeedSequence), so an identical seed yields a bit-identical
    sequence everywhere and the algorithm can be reimplemented exactly in
    other languages.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers drawn from [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
