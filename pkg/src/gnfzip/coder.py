"""Integer range coder with 16-bit probability resolution.

The coder keeps a 32-bit window ``low`` onto the code value and a ``range``
that stays in [2**24, 2**32] after renormalization.  A carry out of ``low``
is pushed back into bytes already written.  The decoder mirrors the
encoder's ``(low, range)`` exactly, symbol by symbol.
"""
from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BadDistribution, CorruptStream

PROB_BITS = 16
TOTAL = 1 << PROB_BITS
TOP = 1 << 24
MASK32 = (1 << 32) - 1
FULL_RANGE = 1 << 32


@dataclass(frozen=True)
class FreqTable:
    freqs: tuple
    cum: tuple  # len(freqs) + 1 prefix sums, cum[-1] == TOTAL

    def __post_init__(self):
        if self.cum[-1] != TOTAL or min(self.freqs) < 1:
            raise BadDistribution("frequencies must be >= 1 and sum to 65536")

    @property
    def total(self) -> int:
        return TOTAL

    @property
    def nsym(self) -> int:
        return len(self.freqs)

    @classmethod
    def from_freqs(cls, freqs) -> "FreqTable":
        freqs = tuple(int(f) for f in freqs)
        cum = [0]
        for f in freqs:
            cum.append(cum[-1] + f)
        return cls(freqs, tuple(cum))


def quantize_row(p) -> list:
    """Quantize one distribution to integer frequencies summing to 65536.

    freq = max(1, round(p * (65536 - V))); the leftover mass then goes one
    unit at a time to the symbols whose exact share ``p * 65536`` exceeds
    their frequency the most (lower index wins ties), and any surplus is
    taken back from the most over-allocated symbols still above 1.
    """
    nsym = len(p)
    total = 0.0
    for x in p:
        if not (x >= 0.0) or x == math.inf:
            raise BadDistribution("probabilities must be finite and non-negative")
        total += x
    if abs(total - 1.0) > 1e-6:
        raise BadDistribution(f"probabilities sum to {total}, not 1")
    scale = TOTAL - nsym
    freqs = [max(1, round(x * scale)) for x in p]
    deficit = TOTAL - sum(freqs)
    if deficit:
        rem = [x * TOTAL - f for x, f in zip(p, freqs)]
        idx = range(nsym)
        while deficit > 0:
            for i in sorted(idx, key=lambda i: -rem[i])[:deficit]:
                freqs[i] += 1
                rem[i] -= 1.0
                deficit -= 1
        while deficit < 0:
            movable = sorted((i for i in idx if freqs[i] > 1), key=lambda i: rem[i])
            for i in movable[:-deficit]:
                freqs[i] -= 1
                rem[i] += 1.0
                deficit += 1
    return freqs


def quantize_batch(probs) -> np.ndarray:
    """Row-wise :func:`quantize_row` over a ``[batch, V]`` array."""
    rows = probs.tolist() if isinstance(probs, np.ndarray) else probs
    return np.array([quantize_probs(r).freqs for r in rows], dtype=np.int64).reshape(len(rows), -1)


def quantize_probs(p) -> FreqTable:
    if isinstance(p, np.ndarray):
        p = p.tolist()
    if len(p) > TOTAL // 2:
        raise BadDistribution("alphabet too large for 16-bit tables")
    return FreqTable.from_freqs(quantize_row(p))


@lru_cache(maxsize=None)
def uniform_table(nsym: int) -> FreqTable:
    return quantize_probs(np.full(nsym, 1.0 / nsym))


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = FULL_RANGE
        self.out = bytearray()
        self.count = 0

    def _carry(self):
        out = self.out
        i = len(out) - 1
        while out[i] == 0xFF:
            out[i] = 0
            i -= 1
        out[i] += 1

    def encode(self, cum_low: int, freq: int, last: bool = False):
        r = self.range >> PROB_BITS
        step = r * cum_low
        low = self.low + step
        # the top symbol absorbs the truncation slack of range // TOTAL
        rng = self.range - step if last else r * freq
        if low > MASK32:
            self._carry()
            low &= MASK32
        while rng < TOP:
            self.out.append(low >> 24)
            low = (low << 8) & MASK32
            rng <<= 8
        self.low = low
        self.range = rng
        self.count += 1

    def encode_symbol(self, table: FreqTable, symbol: int):
        self.encode(table.cum[symbol], table.freqs[symbol], symbol == len(table.freqs) - 1)

    def finalize(self) -> bytes:
        """Emit the fewest bytes that pin a value inside the final interval.

        The decoder reads zeros past the end of the stream, so trailing zero
        bytes are dropped.
        """
        low, high = self.low, self.low + self.range
        for nbytes in range(1, 5):
            unit = 1 << (32 - 8 * nbytes)
            v = -(-low // unit) * unit
            if v < high:
                break
        if v > MASK32:
            self._carry()
            v &= MASK32
        for k in range(nbytes):
            self.out.append((v >> (24 - 8 * k)) & 0xFF)
        data = bytes(self.out).rstrip(b"\x00")
        return data


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.low = 0
        self.range = FULL_RANGE
        self.code = 0
        self.count = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()
        self._r = 0

    def _byte(self) -> int:
        pos = self.pos
        self.pos = pos + 1
        return self.data[pos] if pos < len(self.data) else 0

    def target(self) -> int:
        """Scaled code value; the symbol is the one whose interval contains it."""
        off = (self.code - self.low) & MASK32
        if off >= self.range:
            raise CorruptStream(f"code value left the coding interval after {self.count} symbols")
        self._r = r = self.range >> PROB_BITS
        t = off // r
        return t if t < TOTAL else TOTAL - 1

    def consume(self, cum_low: int, freq: int, last: bool = False):
        r = self._r
        step = r * cum_low
        low = (self.low + step) & MASK32
        rng = self.range - step if last else r * freq
        code = self.code
        while rng < TOP:
            code = ((code << 8) | self._byte()) & MASK32
            low = (low << 8) & MASK32
            rng <<= 8
        self.code, self.low, self.range = code, low, rng
        self.count += 1

    def decode_symbol(self, table: FreqTable) -> int:
        t = self.target()
        s = bisect_right(table.cum, t) - 1
        self.consume(table.cum[s], table.freqs[s], s == len(table.freqs) - 1)
        return s


def encode_symbol(enc: RangeEncoder, table: FreqTable, symbol: int):
    enc.encode_symbol(table, symbol)


def decode_symbol(dec: RangeDecoder, table: FreqTable) -> int:
    return dec.decode_symbol(table)


def finalize(enc: RangeEncoder) -> bytes:
    return enc.finalize()


def shannon_bits(tables, symbols) -> float:
    """Ideal code length of ``symbols`` under the quantized ``tables``."""
    return -sum(math.log2(t.freqs[s] / TOTAL) for t, s in zip(tables, symbols))
