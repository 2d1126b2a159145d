"""Dense f64 arrays, seeded generators and the few elementary ops the rest builds on.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float64. Anything
that accepts a tensor passes it through :func:`as_tensor` first.
"""

from __future__ import annotations

import hashlib

import numpy as np


class DimensionError(ValueError):
    pass


def as_tensor(a, *, allow_nonfinite: bool = False) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    if not allow_nonfinite and not np.all(np.isfinite(out)):
        raise ValueError("tensor contains non-finite values")
    return out


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def softmax_rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if np.isnan(a).any():
        raise ValueError("softmax_rows got NaN input")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def reduce(a, axis: int, kind: str = "sum") -> np.ndarray:
    """Reduce along one axis with ``kind`` in {sum, mean, max}.

    Sums run leftmost-first so results do not depend on numpy's pairwise
    blocking; this keeps head-block reductions bit-reproducible.
    """
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")
    if kind == "max":
        return a.max(axis=axis)
    moved = np.moveaxis(a, axis, 0)
    total = np.zeros(moved.shape[1:])
    for row in moved:
        total = total + row
    if kind == "sum":
        return total
    if kind == "mean":
        return total / moved.shape[0]
    raise ValueError(f"unknown reduction {kind!r}")


def derive_seed(seed: int, stream: int | str) -> int:
    """Child seed for a parallel stream: blake2b(seed XOR hash(stream))."""
    tag = hashlib.blake2b(str(stream).encode(), digest_size=8).digest()
    mixed = (int(seed) & 0xFFFFFFFFFFFFFFFF) ^ int.from_bytes(tag, "little")
    digest = hashlib.blake2b(mixed.to_bytes(8, "little"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Seeded generator backed by numpy's Philox4x64 counter-based bit generator.

    Philox output is defined bit-for-bit by the seed, so streams agree across
    platforms and numpy builds.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.Philox(self.seed))

    def child(self, stream: int | str) -> "Rng":
        return Rng(derive_seed(self.seed, stream))

    def uniform(self, size=None):
        return self.gen.random(size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, seq, size=None, replace=True, p=None):
        return self.gen.choice(seq, size=size, replace=replace, p=p)
