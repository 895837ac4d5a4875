"""Deterministic, platform-stable random number generation.

The generator is SplitMix64 used in counter mode: output k of a stream
seeded with s is mix64(s + k * 0x9E3779B97F4A7C15) where mix64 is the
standard 64-bit finalizer (xor-shift / multiply avalanche). The whole
stream is a pure function of (seed, counter), so draws vectorize, streams
are reproducible bit-for-bit on every platform, and independent substreams
can be forked by hashing a stream id into the seed. Uniforms take the top
53 bits of each word; normals come from Box-Muller pairs.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / float(1 << 53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = z ^ (z >> np.uint64(30))
    z = z * _MIX1
    z = z ^ (z >> np.uint64(27))
    z = z * _MIX2
    return z ^ (z >> np.uint64(31))


@dataclass
class RngState:
    """Position of one SplitMix64 stream. Single-owner: never share across threads."""

    seed: int
    counter: int = field(default=0)

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)):
            raise InvalidArgumentError(f"seed must be an integer, got {type(self.seed).__name__}")
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter) & _MASK64


def rng_new(seed: int) -> RngState:
    """Fresh stream at counter 0."""
    return RngState(seed)


def rng_fork(seed: int, stream: int) -> int:
    """Derive an independent substream seed from (seed, stream id)."""
    z = np.uint64((int(seed) & _MASK64))
    s = np.uint64((int(stream) & _MASK64))
    return int(_mix64(_mix64(z) ^ (s * _GOLDEN)))

def _next_words(state: RngState, n: int) -> np.ndarray:
    if n < 0:
        raise InvalidArgumentError(f"draw count must be >= 0, got {n}")
    ks = (np.uint64(state.counter) + np.arange(1, n + 1, dtype=np.uint64)) * _GOLDEN
    out = _mix64(np.uint64(state.seed) + ks)
    state.counter = (state.counter + n) & _MASK64
    return out


def rng_uniform(state: RngState, n: int) -> np.ndarray:
    """n doubles in [0, 1), 53-bit resolution."""
    return (_next_words(state, n) >> np.uint64(11)).astype(np.float64) * _INV_2_53


def rng_normal(state: RngState, n: int) -> np.ndarray:
    """n standard normal doubles via Box-Muller."""
    m = (n + 1) // 2
    if m == 0:
        return np.zeros(0)
    # u1 in (0, 1] so log is finite; u2 in [0, 1).
    w1 = _next_words(state, m)
    w2 = _next_words(state, m)
    u1 = ((w1 >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
    u2 = (w2 >> np.uint64(11)).astype(np.float64) * _INV_2_53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * np.pi) * u2
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]


def rng_normal_matrix(state: RngState, rows: int, cols: int) -> np.ndarray:
    return rng_normal(state, rows * cols).reshape(rows, cols)


def rng_permutation(state: RngState, n: int) -> np.ndarray:
    """Fisher-Yates shuffle of arange(n) driven by the uniform stream."""
    perm = np.arange(n)
    us = rng_uniform(state, max(n - 1, 0))
    for i in range(n - 1, 0, -1):
        j = int(us[n - 1 - i] * (i + 1))
        j = min(j, i)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def rng_choice(state: RngState, n: int, k: int) -> np.ndarray:
    """k distinct indices from range(n) (first k of a shuffle)."""
    if k > n:
        raise InvalidArgumentError(f"cannot draw {k} distinct indices from {n}")
    return rng_permutation(state, n)[:k]
