"""Counter-based random number generation.

Every stochastic step in the harness (phantom noise, weight init, shuffles)
draws from one documented generator so runs are reproducible bit-for-bit and
can be matched by a reimplementation in any language:

* word i of stream ``seed`` is ``splitmix64(seed + GOLDEN * (i + 1))`` where
  GOLDEN = 0x9E3779B97F4A7C15 and all arithmetic is mod 2**64;
* a uniform in [0, 1) is the top 53 bits of a word times 2**-53;
* gaussians come from Box-Muller over consecutive uniform pairs
  (u1 = 1 - u[2j] so the log argument stays in (0, 1]).
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_M64 = 0xFFFFFFFFFFFFFFFF


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x.astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _words(seed: int, start: int, n: int) -> np.ndarray:
    counters = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    counters = np.uint64(seed & _M64) + np.uint64(GOLDEN) * counters
    return _splitmix64(counters)


def uniforms(seed: int, n: int, start: int = 0) -> np.ndarray:
    """n uniforms in [0, 1) from positions start..start+n-1 of the stream."""
    return (_words(seed, start, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def gaussians(seed: int, n: int, start: int = 0) -> np.ndarray:
    """n standard normals; pair j consumes uniforms 2j and 2j+1.

    start must sit on a pair boundary to resume a stream exactly; callers
    that interleave draws should use distinct derived seeds instead.
    """
    pairs = (n + 1) // 2
    u = uniforms(seed, 2 * pairs, start=2 * ((start + 1) // 2))
    u1 = 1.0 - u[0::2]  # (0, 1]
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs, dtype=np.float64)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n]


def derive_seed(seed: int, *indices: int) -> int:
    """Child seed for a substream, e.g. derive_seed(seed, study_index)."""
    x = seed & _M64
    for idx in indices:
        x = (x + GOLDEN * (idx + 1)) & _M64
        x = int(_splitmix64(np.array([x], dtype=np.uint64))[0])
    return x


def shuffled(n: int, seed: int) -> np.ndarray:
    """Deterministic Fisher-Yates permutation of range(n)."""
    order = np.arange(n)
    u = uniforms(seed, max(n - 1, 0))
    for i in range(n - 1, 0, -1):
        j = int(u[n - 1 - i] * (i + 1))
        order[i], order[j] = order[j], order[i]
    return order
