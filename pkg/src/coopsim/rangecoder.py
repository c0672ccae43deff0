"""Lossless entropy coding layer: a byte-oriented range coder with static
per-channel frequency tables (power-of-two totals) or an adaptive order-0
byte model.  Backed by the kernels backends."""

from dataclasses import dataclass

import numpy as np

from . import kernels

TOTAL = 1 << 16  # frequency precision of static tables


class SymbolRangeError(ValueError):
    pass


@dataclass(frozen=True)
class Bitstream:
    data: bytes
    bit_length: int

    def __post_init__(self):
        if self.bit_length != 8 * len(self.data):
            raise ValueError("bit_length must equal 8 * len(data)")


def build_cum_tables(probs):
    """Quantize per-table probabilities [T,K] to cumulative uint32 tables
    [T,K+1] with total 65536 and every frequency >= 1."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    t, k = probs.shape
    freqs = np.maximum(np.floor(probs * TOTAL).astype(np.int64), 1)
    for row in freqs:
        diff = TOTAL - row.sum()
        row[int(np.argmax(row))] += diff
        if row.min() < 1:
            raise ValueError("probability table too skewed to quantize")
    cum = np.zeros((t, k + 1), dtype=np.uint32)
    cum[:, 1:] = np.cumsum(freqs, axis=1)
    return cum


def table_bits(symbols, table_ids, cum):
    """Ideal code length under the quantized tables: sum -log2(f/total)."""
    symbols = np.asarray(symbols, dtype=np.int64)
    table_ids = np.asarray(table_ids, dtype=np.int64)
    f = cum[table_ids, symbols + 1].astype(np.float64) - cum[table_ids, symbols]
    return float(np.sum(-np.log2(f / TOTAL)))


FLUSH_BITS = 16  # 3-byte flush minus expected final-range slack


def encode(symbols, table_ids, cum):
    """Range-encode symbols under static tables; lossless, near-entropy."""
    symbols = np.ascontiguousarray(symbols, dtype=np.int64)
    table_ids = np.ascontiguousarray(np.broadcast_to(table_ids, symbols.shape), dtype=np.int64)
    k = cum.shape[1] - 1
    if len(symbols) and (symbols.min() < 0 or symbols.max() >= k):
        bad = symbols[(symbols < 0) | (symbols >= k)][0]
        raise SymbolRangeError(f"symbol {bad} outside alphabet [0, {k})")
    out = kernels.rc_encode(symbols, table_ids, np.ascontiguousarray(cum))
    return Bitstream(out.tobytes(), 8 * len(out))


def decode(bits: Bitstream, n, table_ids, cum):
    table_ids = np.ascontiguousarray(np.broadcast_to(table_ids, (n,)), dtype=np.int64)
    data = np.frombuffer(bits.data, dtype=np.uint8)
    return kernels.rc_decode(data, n, table_ids, np.ascontiguousarray(cum))


def encode_adaptive(symbols, alphabet=256):
    symbols = np.ascontiguousarray(symbols, dtype=np.int64)
    if len(symbols) and (symbols.min() < 0 or symbols.max() >= alphabet):
        raise SymbolRangeError(f"symbol outside alphabet [0, {alphabet})")
    out = kernels.rc_encode_adaptive(symbols, alphabet)
    return Bitstream(out.tobytes(), 8 * len(out))


def decode_adaptive(bits: Bitstream, n, alphabet=256):
    data = np.frombuffer(bits.data, dtype=np.uint8)
    return kernels.rc_decode_adaptive(data, n, alphabet)
