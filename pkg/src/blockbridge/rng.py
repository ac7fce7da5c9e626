"""Counter-based deterministic RNG (splitmix64) used for data generation and seed derivation.

Everything downstream of a 64-bit key is a pure function of that key, so datasets
never need to be stored and independent random streams can be derived per phase
without any global RNG state.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Tiny sequential generator over a 64-bit state."""

    def __init__(self, seed: int) -> None:
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return _mix(self._state)

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (exactly unbiased)."""
        if n <= 0:
            raise ValueError(f"next_below requires n > 0, got {n}")
        bound = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < bound:
                return u % n

    def next_unit(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (2.0**-53)

    def sample_distinct(self, n: int, k: int) -> list[int]:
        """k distinct integers from [0, n), in draw order."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct values from range of {n}")
        seen: set[int] = set()
        out: list[int] = []
        while len(out) < k:
            v = self.next_below(n)
            if v not in seen:
                seen.add(v)
                out.append(v)
        return out


def derive_seed(seed: int, *parts: int | str) -> int:
    """Derive an independent 64-bit stream key from a base seed and a path of tags.

    String tags are folded byte-wise so distinct names cannot collide with small
    integer indices.
    """
    state = _mix(seed & _MASK64)
    for part in parts:
        if isinstance(part, str):
            for b in part.encode("utf-8"):
                state = _mix((state ^ b) * _GOLDEN & _MASK64)
            state = _mix(state ^ 0xA5A5A5A5A5A5A5A5)
        else:
            state = _mix((state ^ (part & _MASK64)) * _GOLDEN & _MASK64)
    return state
