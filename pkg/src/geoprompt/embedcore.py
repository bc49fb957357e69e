"""Vector math primitives, deterministic RNG, and numeric conventions.

All arithmetic is 64-bit floating point. Inputs read from files may be
32-bit; they are widened on ingestion. Embedding vectors are plain 1-D
``numpy.float64`` arrays throughout the package.

Randomness uses numpy's Philox counter-based bit generator, which has a
documented, platform-independent bit stream. A ``Rng`` holds one logical
stream; independent streams are obtained by :meth:`Rng.derive`, never by
sharing a generator between tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import DimensionMismatchError, EmptyListError, NearZeroNormError

NORM_EPS = 1e-12


def as_vector(values: Any) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatchError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding vector contains NaN or Inf")
    return v


def l2_normalize(v: Any) -> np.ndarray:
    """Scale ``v`` to unit L2 norm, preserving direction.

    Raises NearZeroNormError when the norm is at or below 1e-12, where the
    direction is numerically meaningless.
    """
    v = as_vector(v)
    n = float(np.linalg.norm(v))
    if n <= NORM_EPS:
        raise NearZeroNormError(f"cannot normalize vector with norm {n!r}")
    return v / n


def cosine_sim(a: Any, b: Any) -> float:
    """Cosine similarity a.b / (|a||b|), clamped to [-1, 1] against rounding."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"cosine_sim shapes differ: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise NearZeroNormError("cosine_sim requires both norms > 1e-12")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def mean_vectors(vs: Iterable[Any]) -> np.ndarray:
    """Componentwise arithmetic mean. The result is NOT re-normalized.

    A mean may cancel to (near) zero; downstream consumers that need a
    direction must guard with :func:`l2_normalize`.
    """
    mats = [as_vector(v) for v in vs]
    if not mats:
        raise EmptyListError("mean_vectors over an empty list")
    dim = mats[0].shape[0]
    for i, m in enumerate(mats):
        if m.shape[0] != dim:
            raise DimensionMismatchError(
                f"mean_vectors entry {i} has dim {m.shape[0]}, expected {dim}"
            )
    return np.mean(np.stack(mats), axis=0)


@dataclass
class Rng:
    """Seeded Philox-backed random stream.

    ``seed`` and ``stream`` form the Philox key, so (seed, stream) fully
    determines the bit sequence on every platform. An Rng instance belongs to
    one logical task; use :meth:`derive` to hand independent streams to
    subtasks.
    """

    seed: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def derive(self, stream: int) -> "Rng":
        """A fresh, statistically independent stream under the same seed."""
        return Rng(self.seed, stream)

    def normal(self, scale: float = 1.0, size: Any = None) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, items: Sequence[Any], size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(items, size=size, replace=replace)

    def integers(self, low: int, high: int, size: Any = None):
        return self._gen.integers(low, high, size=size)

    def state_dict(self) -> dict:
        """JSON-serializable snapshot of the full generator state."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(x) for x in st["state"]["counter"]],
            "key": [int(x) for x in st["state"]["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "Rng":
        rng = cls(int(d["seed"]), int(d["stream"]))
        st = rng._gen.bit_generator.state
        st["state"]["counter"] = np.array(d["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(d["key"], dtype=np.uint64)
        st["buffer"] = np.array(d["buffer"], dtype=np.uint64)
        st["buffer_pos"] = d["buffer_pos"]
        st["has_uint32"] = d["has_uint32"]
        st["uinteger"] = d["uinteger"]
        rng._gen.bit_generator.state = st
        return rng
