"""Deterministic, platform-independent PRNG used for splits and synthesis.

The generator is SplitMix64 (Steele et al.'s mix function): 64-bit counter
state advanced by the odd constant 0x9E3779B97F4A7C15, output finalized with
two xor-shift multiplies.  It is tiny, splittable by reseeding from derived
keys, and produces identical streams on every platform and Python build,
which is what the corpus determinism contracts require.  Update rule:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

all arithmetic mod 2**64.
"""

MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive(seed: int, *parts) -> int:
    """Derive an independent child seed from a root seed and a key path.

    Parts may be ints or strings; each is folded into the state through the
    SplitMix64 finalizer, so (seed, "split", 0) and (seed, "split", 1) give
    unrelated streams.
    """
    h = _mix(seed & MASK64)
    for part in parts:
        if isinstance(part, str):
            for b in part.encode("utf-8"):
                h = _mix((h + _GAMMA + b) & MASK64)
        else:
            h = _mix((h ^ (int(part) & MASK64)) & MASK64)
    return h


class SplitMix64:
    """Seeded SplitMix64 stream with the integer helpers the lab needs."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & MASK64
        return _mix(self._state)

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (unbiased)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def next_int(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + self.next_below(hi - lo + 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.next_below(len(items))]
