"""Deterministic dense-array arithmetic, seeded sampling, and the
finite-difference gradient oracle every backward pass is tested against.

All computation is 64-bit. Arrays are plain numpy ndarrays in row-major
order; this module only adds the error contracts and determinism
guarantees the rest of the package relies on.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DimensionError, DomainError, NumericError

__all__ = [
    "SeededRng",
    "normal_sample",
    "matmul",
    "batch_moments",
    "finite_diff_grad",
]

_U64 = (1 << 64) - 1


class SeededRng:
    """Seeded random stream: the same seed yields the same samples, bit for bit.

    Wraps a PCG64 generator. Children derived with spawn(key) are
    independent deterministic streams, so regeneration loops can draw
    fresh candidates without disturbing the parent stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def random(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "SeededRng":
        """Derive an independent child stream from (seed, key)."""
        material = f"{self.seed}:{int(key)}".encode()
        digest = hashlib.blake2b(material, digest_size=8).digest()
        return SeededRng(int.from_bytes(digest, "little"))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"


def normal_sample(rng: SeededRng, shape, scale: float) -> np.ndarray:
    """Draw scale * N(0, 1) samples, advancing rng deterministically.

    scale = 0 still consumes the same amount of stream, so swapping the
    scale never shifts later draws.
    """
    if scale < 0:
        raise DomainError(f"normal_sample scale must be >= 0, got {scale}")
    return float(scale) * rng.normal(shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product with explicit shape checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul needs rank-2 operands, got ranks {a.ndim} and {b.ndim}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    return a @ b


def batch_moments(x: np.ndarray, axis=0) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and population variance (divide by N, not N-1)
    over the given batch axis or axes."""
    x = np.asarray(x, dtype=np.float64)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    if count < 1:
        raise DomainError("batch_moments needs a nonempty batch")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)  # ddof=0: population variance
    return mean, var


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function f at x.

    This is the oracle for every analytic backward pass: slow, simple,
    and independent of the code under test.
    """
    if eps <= 0:
        raise DomainError(f"finite_diff_grad eps must be > 0, got {eps}")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        f_plus = float(f(x))
        flat_x[i] = orig - eps
        f_minus = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(
                f"finite_diff_grad: non-finite evaluation at coordinate {i}"
            )
        flat_g[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
