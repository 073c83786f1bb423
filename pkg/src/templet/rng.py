"""SplitMix64 generator with Box-Muller normals.

The stream is fully specified so it reproduces bit-for-bit anywhere:

* state advances by ``0x9E3779B97F4A7C15`` per draw (mod 2**64) and the
  output is the standard SplitMix64 finalizer of the new state;
* a uniform is ``(u64 >> 11) * 2**-53`` in [0, 1);
* normals come in pairs from two consecutive uniforms ``a, b``:
  ``r = sqrt(-2 ln(1 - a))``, ``z0 = r cos(2 pi b)``, ``z1 = r sin(2 pi b)``,
  evaluated in float64 and emitted in that order.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK = (1 << 64) - 1


def mix64(z: int) -> int:
    z &= MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Seed for an independent substream, e.g. ``derive_seed(seed, 1)``."""
    s = seed & MASK
    for k in keys:
        s = mix64(s ^ mix64((k + 1) * GAMMA))
    return s


class SplitMix64:
    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK
        self.state = self.seed

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK
        return mix64(self.state)

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw outputs; equivalent to ``n`` calls of :meth:`next_u64`."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        states = np.uint64(self.state) + steps * np.uint64(GAMMA)
        self.state = (self.state + n * GAMMA) & MASK
        return _mix64_array(states)

    def uniform(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size, dtype=np.float32) -> np.ndarray:
        n = int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return z.astype(dtype).reshape(size)

    def integers(self, high: int, size=None) -> np.ndarray | int:
        """Uniform integers in [0, high)."""
        u = self.uniform(size if size is not None else 1)
        out = np.minimum((np.asarray(u) * high).astype(np.int64), high - 1)
        return int(out.reshape(-1)[0]) if size is None else out

    def spawn(self, key: int) -> "SplitMix64":
        return SplitMix64(derive_seed(self.seed, key))


def seeded_rng(seed: int) -> SplitMix64:
    return SplitMix64(seed)
