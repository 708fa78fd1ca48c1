"""Seeded xorshift64* generator, vectorised over independent lanes.

Each lane is a xorshift64* stream (Vigna 2016: shifts 12/25/27, output
multiplier 0x2545F4914F6CDD1D) seeded from the master seed by splitmix64.
Drawing ``n`` numbers steps all lanes ``ceil(n / lanes)`` times and reads
them lane-major per step, so output depends only on the seed and the sequence
of draw sizes. Gaussian draws use Box-Muller.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
XORSHIFT_MULT = 0x2545F4914F6CDD1D
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
DEFAULT_LANES = 256

_S12, _S25, _S27 = np.uint64(12), np.uint64(25), np.uint64(27)
_MULT = np.uint64(XORSHIFT_MULT)
_S11 = np.uint64(11)


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next state, output)."""
    x = (x + SPLITMIX_GAMMA) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def derive_seed(seed: int, *path: int) -> int:
    """Child seed for a (seed, i, j, ...) path; used to give each cycle its own stream."""
    x = seed & MASK64
    for p in path:
        x, out = splitmix64(x ^ (p & MASK64))
        x = out
    return x


class XorShiftRng:
    def __init__(self, seed: int, lanes: int = DEFAULT_LANES):
        x = int(seed) & MASK64
        states = []
        for _ in range(lanes):
            x, out = splitmix64(x)
            states.append(out or 1)  # all-zero state is a fixed point
        self._state = np.array(states, dtype=np.uint64)
        self.lanes = lanes

    def next_u64(self, n: int) -> np.ndarray:
        steps = -(-n // self.lanes)
        out = np.empty((steps, self.lanes), dtype=np.uint64)
        s = self._state
        for k in range(steps):
            s ^= s >> _S12
            s ^= s << _S25
            s ^= s >> _S27
            out[k] = s * _MULT
        return out.reshape(-1)[:n]

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        return (self.next_u64(n) >> _S11).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int, scale: float = 1.0) -> np.ndarray:
        m = -(-n // 2)
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z * scale if scale != 1.0 else z
