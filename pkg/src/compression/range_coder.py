"""
Carry-less range coder (Subbotin) over 16-bit quantized cumulative frequency tables.

State is a 32-bit (low, range) pair; bytes are emitted MSB first. A stream ends with
a 16-bit terminator literal, and the decoder must consume exactly the bytes that were
written, which catches truncation and most corruptions.
"""
from typing import List, Sequence

import numpy as np

from src.utilities.exceptions import BitstreamError

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
BOT = 1 << 16
MASK32 = 0xFFFFFFFF
TERMINATOR = 0xA5A5


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.buffer = bytearray()
        self.symbols = 0

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.buffer.append((self.low >> 24) & 0xFF)
            self.range = (self.range << 8) & MASK32
            self.low = (self.low << 8) & MASK32

    def encode_freq(self, sym_freq: int, cum_freq: int, tot_freq: int):
        if sym_freq <= 0 or cum_freq + sym_freq > tot_freq or tot_freq > BOT:
            raise ValueError(f"Invalid frequency triple ({sym_freq}, {cum_freq}, {tot_freq})")
        self.range //= tot_freq
        self.low += cum_freq * self.range
        self.range *= sym_freq
        self._normalize()
        self.symbols += 1

    def encode_symbol(self, symbol: int, cdf: Sequence[int]):
        """cdf: cumulative table with cdf[0] = 0 and cdf[-1] = TOTAL."""
        if not 0 <= symbol < len(cdf) - 1:
            raise ValueError(f"Symbol {symbol} outside alphabet of size {len(cdf) - 1}")
        start = int(cdf[symbol])
        self.encode_freq(int(cdf[symbol + 1]) - start, start, int(cdf[-1]))

    def encode_literal(self, value: int, bits: int):
        self.encode_freq(1, value, 1 << bits)

    def finish(self) -> bytes:
        self.encode_literal(TERMINATOR, 16)
        for _ in range(4):
            self.buffer.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK32
        return bytes(self.buffer)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.position = 0
        self.low = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._read_byte()

    def _read_byte(self) -> int:
        if self.position >= len(self.data):
            raise BitstreamError(f"Range decoder ran past the end of a {len(self.data)}-byte stream")
        byte = self.data[self.position]
        self.position += 1
        return byte

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.code = ((self.code << 8) | self._read_byte()) & MASK32
            self.range = (self.range << 8) & MASK32
            self.low = (self.low << 8) & MASK32

    def decode_freq(self, tot_freq: int) -> int:
        self.range //= tot_freq
        cum_freq = (self.code - self.low) // self.range
        if not 0 <= cum_freq < tot_freq:
            raise BitstreamError("Decoded cumulative frequency outside the table")
        return cum_freq

    def update(self, sym_freq: int, cum_freq: int):
        self.low += cum_freq * self.range
        self.range *= sym_freq
        self._normalize()

    def decode_symbol(self, cdf: np.ndarray) -> int:
        target = self.decode_freq(int(cdf[-1]))
        symbol = int(np.searchsorted(cdf, target, side='right')) - 1
        start = int(cdf[symbol])
        self.update(int(cdf[symbol + 1]) - start, start)
        return symbol

    def decode_literal(self, bits: int) -> int:
        value = self.decode_freq(1 << bits)
        self.update(1, value)
        return value

    def finish(self):
        if self.decode_literal(16) != TERMINATOR:
            raise BitstreamError("Terminator mismatch: stream corrupted")
        # the encoder flushed 4 bytes that the decoder preloaded at construction
        if self.position != len(self.data):
            raise BitstreamError(f"Decoder consumed {self.position} of {len(self.data)} bytes")


def pmf_to_quantized_cdf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """
    Rows of probabilities -> rows of strictly increasing cumulative tables summing to 2^precision.

    Every symbol gets frequency 1 + floor(p * (total - n)); the rounding remainder is
    added to the most probable symbol.

    Args:
        pmf: (rows, n) non-negative, rows summing to ~1
    Returns:
        (rows, n + 1) int64, cdf[:, 0] = 0 and cdf[:, -1] = 2^precision
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    total = 1 << precision
    rows, n = pmf.shape
    if n > total:
        raise ValueError(f"Alphabet of {n} symbols does not fit {precision}-bit precision")
    pmf = np.clip(pmf, 0.0, None)
    pmf = pmf / np.maximum(pmf.sum(axis=1, keepdims=True), np.finfo(np.float64).tiny)
    freq = 1 + np.floor(pmf * (total - n)).astype(np.int64)
    remainder = total - freq.sum(axis=1)
    freq[np.arange(rows), pmf.argmax(axis=1)] += remainder
    cdf = np.zeros((rows, n + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf


def check_cdf(cdf: np.ndarray):
    cdf = np.asarray(cdf)
    if cdf[0] != 0 or cdf[-1] > BOT or np.any(np.diff(cdf) <= 0):
        raise ValueError("CDF must start at 0, be strictly increasing and end at most at 2^16")


def range_encode(symbols: Sequence[int], cdfs: Sequence[np.ndarray]) -> bytes:
    if len(symbols) != len(cdfs):
        raise ValueError(f"{len(symbols)} symbols but {len(cdfs)} cdf tables")
    encoder = RangeEncoder()
    for symbol, cdf in zip(symbols, cdfs):
        encoder.encode_symbol(int(symbol), cdf)
    return encoder.finish()


def range_decode(data: bytes, cdfs: Sequence[np.ndarray]) -> List[int]:
    decoder = RangeDecoder(data)
    symbols = [decoder.decode_symbol(np.asarray(cdf)) for cdf in cdfs]
    decoder.finish()
    return symbols
