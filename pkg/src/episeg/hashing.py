"""Fixed random weight hashing: expands a short vector into a longer one.

Each output coefficient copies one input coefficient with a random sign,
``out[i] = x[source[i]] * sign[i]``. The index and sign tables come from a
SplitMix64 stream so any implementation can regenerate them from
``(seed, in_dim, out_dim)`` alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, signed_gather

PRNG_NAME = "splitmix64-v1"

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of SplitMix64 started from ``seed``."""
    state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        z = state + _GAMMA * np.arange(1, n + 1, dtype=np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _below(draws: np.ndarray, bound: int) -> np.ndarray:
    # multiply-shift range reduction: floor(draw * bound / 2**64)
    hi = draws >> np.uint64(32)
    lo = draws & np.uint64(0xFFFFFFFF)
    n = np.uint64(bound)
    carry = (lo * n) >> np.uint64(32)
    return ((hi * n + carry) >> np.uint64(32)).astype(np.int64)


@dataclass(frozen=True)
class HashingSpec:
    in_dim: int
    out_dim: int
    source: np.ndarray
    sign: np.ndarray
    seed: int

    def __post_init__(self):
        if self.source.shape != (self.out_dim,) or self.sign.shape != (self.out_dim,):
            raise ValueError("HashingSpec: source/sign must have length out_dim")
        if self.out_dim and (self.source.min() < 0 or self.source.max() >= self.in_dim):
            raise ValueError("HashingSpec: source index out of [0, in_dim)")
        if not np.isin(self.sign, (-1.0, 1.0)).all():
            raise ValueError("HashingSpec: sign must be +-1")
        self.source.setflags(write=False)
        self.sign.setflags(write=False)


def build_hashing(seed: int, in_dim: int, out_dim: int) -> HashingSpec:
    if in_dim < 1 or out_dim < 1:
        raise ValueError(f"build_hashing: dimensions must be positive, got in_dim={in_dim}, out_dim={out_dim}")
    if in_dim >= 2**31:
        raise ValueError("build_hashing: in_dim must be below 2**31")
    draws = splitmix64(seed, 2 * out_dim)
    source = _below(draws[0::2], in_dim)
    sign = np.where(draws[1::2] >> np.uint64(63), -1.0, 1.0)
    return HashingSpec(in_dim=in_dim, out_dim=out_dim, source=source, sign=sign, seed=seed)


def hash_forward(x, spec: HashingSpec):
    """Apply the hashing layer to a vector (ndarray) or a tracked Tensor."""
    if isinstance(x, Tensor):
        if x.shape != (spec.in_dim,):
            raise ShapeError(f"hash_forward: expected length {spec.in_dim}, got {x.shape}")
        return signed_gather(x, spec.source, spec.sign)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.in_dim,):
        raise ShapeError(f"hash_forward: expected length {spec.in_dim}, got {x.shape}")
    return x[spec.source] * spec.sign


def as_matrix(spec: HashingSpec) -> np.ndarray:
    """Dense [out_dim, in_dim] matrix with exactly one signed unit entry per row."""
    W = np.zeros((spec.out_dim, spec.in_dim))
    W[np.arange(spec.out_dim), spec.source] = spec.sign
    return W
