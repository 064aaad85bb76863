"""Seeded random streams and the small dense-vector vocabulary.

Vectors and matrices are plain ``float64`` numpy arrays. The constructors here
validate finiteness and hand back read-only copies so values can be shared
between trials without defensive copying.
"""

from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np
import numpy.typing as npt

from .errors import DimensionMismatchError, InvalidDimensionError, NonFiniteError

Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]


def as_vector(values: Iterable[float] | npt.ArrayLike) -> Vector:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise InvalidDimensionError("vector must have dimension >= 1")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("vector contains non-finite entries")
    arr.setflags(write=False)
    return arr


def as_matrix(values: npt.ArrayLike) -> Matrix:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidDimensionError(f"matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("matrix contains non-finite entries")
    arr.setflags(write=False)
    return arr


def _label_key(label: object) -> int:
    digest = hashlib.blake2b(repr(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Counter-based random stream (Philox) keyed by a seed and a label path.

    ``child(*labels)`` derives an independent stream from ``(seed, path + labels)``
    without consuming draws from the parent, so the order in which children are
    created never changes what they produce.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        seq = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(_label_key(p) for p in self.path)
        )
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *labels: object) -> "RngStream":
        return RngStream(self.seed, self.path + labels)

    def clone(self) -> "RngStream":
        """Copy including the current counter position."""
        other = RngStream(self.seed, self.path)
        other._gen.bit_generator.state = self._gen.bit_generator.state
        return other

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size=None, replace: bool = True):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path!r})"


def gaussian_vector(rng: RngStream, d: int) -> Vector:
    if d < 1:
        raise InvalidDimensionError(f"dimension must be >= 1, got {d}")
    out = rng.normal(d)
    out.setflags(write=False)
    return out


def dot(a: Vector, b: Vector) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dot: shapes {a.shape} and {b.shape} differ")
    return float(np.dot(a, b))


def norms(a: Vector) -> tuple[float, float]:
    """Return ``(l1, l2)``."""
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(np.abs(a))), float(np.sqrt(np.dot(a.ravel(), a.ravel())))


def unit(a: Vector, tol: float = 1e-12) -> Vector:
    """``a / ||a||``, or the zero vector when ``||a|| < tol``."""
    n = float(np.linalg.norm(a))
    if n < tol:
        return np.zeros_like(a, dtype=np.float64)
    return np.asarray(a, dtype=np.float64) / n
