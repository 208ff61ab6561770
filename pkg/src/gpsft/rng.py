"""Deterministic random streams.

Every piece of randomness in the package flows from one 64-bit seed
through named splitmix64 substreams, so each component (init, shuffle,
random selection, synthetic data) can be reproduced in isolation.
"""

import numpy as np

_MASK64 = (1 << 64) - 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data) -> int:
    """64-bit FNV-1a hash of bytes or a string."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


class SplitMix64:
    """splitmix64 generator: tiny state, solid mixing, fully portable."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        # 53 high bits -> uniform double in [0, 1)
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (no modulo bias)."""
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            u = self.next_u64()
            if u <= limit:
                return u % n

    def uniform(self, lo: float, hi: float, size) -> np.ndarray:
        out = np.empty(size, dtype=np.float64)
        flat = out.reshape(-1)
        for i in range(flat.shape[0]):
            flat[i] = lo + (hi - lo) * self.next_float()
        return out

    def normal(self, size) -> np.ndarray:
        """Standard normals via Box-Muller on the stream."""
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        vals = np.empty(n + (n % 2), dtype=np.float64)
        for i in range(0, vals.shape[0], 2):
            u1 = self.next_float()
            u2 = self.next_float()
            while u1 <= 1e-300:
                u1 = self.next_float()
            r = np.sqrt(-2.0 * np.log(u1))
            vals[i] = r * np.cos(2.0 * np.pi * u2)
            vals[i + 1] = r * np.sin(2.0 * np.pi * u2)
        out = vals[:n]
        return out.reshape(size) if not np.isscalar(size) else out

    def shuffle(self, items) -> None:
        """In-place Fisher-Yates shuffle of a list or 1-d array."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from [0, n), via partial Fisher-Yates.

        Returned in draw order; callers needing sorted output sort it.
        """
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} from {n}")
        pool = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()


def substream(seed: int, *labels) -> SplitMix64:
    """Named substream of a master seed.

    Labels (strings or ints) are folded into the seed with FNV-1a, so
    ("init", tensor_name) and ("shuffle",) never collide in practice.
    """
    h = seed & _MASK64
    for label in labels:
        if isinstance(label, int):
            label = str(label)
        h = (h ^ fnv1a64(label)) * FNV_PRIME & _MASK64
    return SplitMix64(h)
