"""Stack-based rANS entropy coder.

Symbols are pushed onto and popped off a single integer state, last in
first out, against quantized probability tables whose frequencies sum to a
power of two.  This is the 64-bit variant with byte-granular
renormalization: between operations the state sits in [2^32, 2^40), low
bytes spill onto a byte stack as the state grows, and a final flush stores
the whole 64-bit word.

    pmf = pmf_quantize([0.5, 0.25, 0.25])
    coder = AnsCoder()
    coder.push(1, pmf)
    assert coder.pop(pmf) == 1
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataCorruptionError, ExhaustedStreamError, InvalidInputError

RANS_L = 1 << 32  # lower bound of the normalized state interval
RENORM_SHIFT = 8  # renormalization emits one byte at a time

DEFAULT_PRECISION = 12
MIN_PRECISION = 2
MAX_PRECISION = 16

STREAM_MAGIC = b"DRRB"
STREAM_FORMAT_VERSION = 1


@dataclass(frozen=True)
class QuantizedPmf:
    """Frequency table over a finite alphabet, summing to 1 << precision.

    Every frequency is at least 1, so every symbol stays codable, and the
    cumulative table is strictly increasing.
    """

    precision: int
    freqs: np.ndarray  # int64, shape (A,)
    cdf: np.ndarray    # int64, shape (A + 1,), cdf[0] == 0

    @property
    def alphabet_size(self) -> int:
        return len(self.freqs)

    def probs(self) -> np.ndarray:
        """The dyadic probabilities freqs / 2**precision (sums to 1.0 exactly)."""
        return self.freqs / float(1 << self.precision)

    def cost_bits(self, symbol: int) -> float:
        """Ideal code length of `symbol` in bits: precision - log2(freq)."""
        return self.precision - math.log2(int(self.freqs[symbol]))


def pmf_quantize(probs, precision: int = DEFAULT_PRECISION) -> QuantizedPmf:
    """Round a probability vector to integer frequencies summing to 2**precision.

    Largest-remainder rounding with every frequency clamped to at least 1;
    ties go to the lowest symbol.  Rejects alphabets larger than
    2**precision, which could not give each symbol a nonzero frequency.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidInputError("pmf must be a nonempty 1-d array")
    if not (MIN_PRECISION <= precision <= MAX_PRECISION):
        raise InvalidInputError(f"precision {precision} outside [{MIN_PRECISION}, {MAX_PRECISION}]")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError("pmf entries must be finite and nonnegative")
    total = p.sum()
    if total <= 0:
        raise InvalidInputError("pmf must have positive mass")
    target = 1 << precision
    n = p.size
    if n > target:
        raise InvalidInputError(f"alphabet size {n} exceeds 2**{precision}")

    scaled = p * (target / total)
    freqs = np.maximum(np.floor(scaled).astype(np.int64), 1)
    diff = target - int(freqs.sum())
    if diff > 0:
        # Hand out +1 by descending remainder, lowest symbol first on ties.
        remainders = scaled - np.floor(scaled)
        order = np.lexsort((np.arange(n), -remainders))
        for i in range(diff):
            freqs[order[i % n]] += 1
    elif diff < 0:
        # The min-frequency clamp overshot; take back from the symbols that
        # are furthest above their ideal share, never dropping below 1.
        for _ in range(-diff):
            over = freqs.astype(np.float64) - scaled
            over[freqs <= 1] = -np.inf
            freqs[int(np.argmax(over))] -= 1

    cdf = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(freqs, out=cdf[1:])
    return QuantizedPmf(precision=precision, freqs=freqs, cdf=cdf)


def entropy_from_freqs(freqs) -> float:
    """Shannon entropy in bits of a frequency (or probability) vector."""
    f = np.asarray(freqs, dtype=np.float64)
    if f.ndim != 1 or f.size == 0 or np.any(f < 0) or f.sum() <= 0:
        raise InvalidInputError("frequencies must be a nonempty nonnegative 1-d array")
    p = f / f.sum()
    nz = p > 0
    return float(-(p[nz] * np.log2(p[nz])).sum())


def entropy_from_sample(symbols, alphabet_size: int | None = None) -> float:
    """Empirical entropy in bits of an integer sample."""
    s = np.asarray(symbols)
    if s.size == 0:
        raise InvalidInputError("sample must be nonempty")
    counts = np.bincount(s, minlength=alphabet_size or 0)
    return entropy_from_freqs(counts)


class AnsCoder:
    """Mutable rANS coder: integer state plus a byte stack.

    `ideal_bits` accumulates the information content of what is currently
    held: each push adds precision - log2(freq), each pop takes the same
    amount back.  It is bookkeeping only and is not serialized.
    """

    __slots__ = ("state", "stack", "ideal_bits")

    def __init__(self, state: int = RANS_L, stack: bytes = b"", ideal_bits: float = 0.0):
        self.state = state
        self.stack = bytearray(stack)
        self.ideal_bits = ideal_bits

    @classmethod
    def with_random_bits(cls, n_bits: int, seed: int) -> "AnsCoder":
        """Fresh coder whose stack holds n_bits of seeded pseudo-random data.

        Bits-back decoding pops latents out of this slack before any real
        payload exists.
        """
        if n_bits < 0 or n_bits % 8 != 0:
            raise InvalidInputError("n_bits must be a nonnegative multiple of 8")
        rng = np.random.default_rng(seed)
        raw = rng.integers(0, 256, size=n_bits // 8, dtype=np.uint8).tobytes()
        return cls(stack=raw)

    def copy(self) -> "AnsCoder":
        return AnsCoder(self.state, bytes(self.stack), self.ideal_bits)

    @property
    def bit_length(self) -> int:
        """Message size in bits if flushed now (full 64-bit state + stack)."""
        return 64 + 8 * len(self.stack)

    def potential(self) -> float:
        """Information currently held, in bits: stack plus log2(state)."""
        return 8.0 * len(self.stack) + math.log2(self.state)

    def push(self, symbol: int, pmf: QuantizedPmf) -> None:
        """Encode one symbol onto the stack."""
        f = int(pmf.freqs[symbol])
        c = int(pmf.cdf[symbol])
        precision = pmf.precision
        # Renormalize so the post-push state stays below RANS_L << 8.
        x = self.state
        x_max = ((RANS_L >> precision) << RENORM_SHIFT) * f
        while x >= x_max:
            self.stack.append(x & 0xFF)
            x >>= RENORM_SHIFT
        self.state = ((x // f) << precision) + (x % f) + c
        self.ideal_bits += precision - math.log2(f)

    def pop(self, pmf: QuantizedPmf) -> int:
        """Decode one symbol off the stack (exact inverse of push)."""
        precision = pmf.precision
        mask = (1 << precision) - 1
        cum = self.state & mask
        symbol = int(np.searchsorted(pmf.cdf, cum, side="right")) - 1
        f = int(pmf.freqs[symbol])
        c = int(pmf.cdf[symbol])
        x = f * (self.state >> precision) + cum - c
        while x < RANS_L:
            if not self.stack:
                raise ExhaustedStreamError("byte stack underflow during pop")
            x = (x << RENORM_SHIFT) | self.stack.pop()
        self.state = x
        self.ideal_bits -= precision - math.log2(f)
        return symbol

    def serialize(self) -> bytes:
        """Flush to bytes: magic, format version, payload length, state, stack.

        The stack is stored bottom first, so the most recently emitted byte
        is last.  All integers are little-endian.
        """
        payload_len = 8 + len(self.stack)
        head = STREAM_MAGIC + struct.pack("<HQ", STREAM_FORMAT_VERSION, payload_len)
        return head + struct.pack("<Q", self.state) + bytes(self.stack)

    @classmethod
    def deserialize(cls, data: bytes) -> "AnsCoder":
        head_len = len(STREAM_MAGIC) + 2 + 8
        if len(data) < head_len or data[:4] != STREAM_MAGIC:
            raise DataCorruptionError("bad bitstream magic")
        version, payload_len = struct.unpack("<HQ", data[4:head_len])
        if version != STREAM_FORMAT_VERSION:
            raise DataCorruptionError(f"unsupported bitstream format version {version}")
        if len(data) != head_len + payload_len or payload_len < 8:
            raise DataCorruptionError("bitstream length mismatch")
        state = struct.unpack("<Q", data[head_len:head_len + 8])[0]
        stack = data[head_len + 8:]
        return cls(state=state, stack=stack)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AnsCoder):
            return NotImplemented
        return self.state == other.state and self.stack == other.stack

    def __repr__(self) -> str:
        return f"AnsCoder(state={self.state:#x}, stack_bytes={len(self.stack)})"
