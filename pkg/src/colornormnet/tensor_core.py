"""Dense float32 tensors and a portable splitmix64 generator.

Tensors are plain ``numpy.ndarray`` objects. Single images use (C, H, W)
and batches use (N, C, H, W); everything is row-major.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidRangeError, ShapeMismatchError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class Rng:
    """splitmix64 stream. Identical seeds give identical sequences everywhere.

    The generator is single-owner; derive independent children with
    :meth:`child` instead of sharing an instance.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        if not lo < hi:
            raise InvalidRangeError(f"uniform range requires lo < hi, got [{lo}, {hi})")
        u = (self.next_u64() >> 11) / 9007199254740992.0  # 2**53
        return lo + (hi - lo) * u

    def integers(self, n: int) -> int:
        """Uniform integer in [0, n) via the same 53-bit mapping."""
        if n < 1:
            raise InvalidRangeError(f"integer range must be positive, got {n}")
        return min(int(self.uniform() * n), n - 1)

    def child(self) -> "Rng":
        return Rng(self.next_u64())

    def u64_array(self, n: int) -> np.ndarray:
        """Next ``n`` outputs as uint64, identical to ``n`` calls of next_u64."""
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z

    def uniform_array(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Vectorized :meth:`uniform`; float64 results, bit-identical to the scalar path."""
        if not lo < hi:
            raise InvalidRangeError(f"uniform range requires lo < hi, got [{lo}, {hi})")
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) / 9007199254740992.0
        return lo + (hi - lo) * u


def rng_next_u64(rng: Rng) -> int:
    return rng.next_u64()


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    return rng.uniform(lo, hi)


def tensor(data, shape=None) -> np.ndarray:
    """Build a float32 tensor, checking the shape/data invariants."""
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ShapeMismatchError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim == 0 or any(s < 1 for s in arr.shape):
        raise ShapeMismatchError(f"tensor dimensions must all be >= 1, got {arr.shape}")
    return arr


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.float32)


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"elementwise {op}: shapes {a.shape} and {b.shape} differ")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}") from None
    return fn(a, b)
