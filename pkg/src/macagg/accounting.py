"""Vectorised security accounting from a delivery mask.

Loss-only evaluation of a scheme needs no cryptography: whether a check
passes on an untampered stream depends only on which records arrived.  This is
the fast path for parameter studies; ``tests/test_accounting.py`` pins it to
the ``VerifyState`` ledger on random loss patterns.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .auth import TAG_BITS, WINDOW, AggScheme, SchemeId, _JITTER_BLOCK, _bases, _jitter
from .record import HEADER_BYTES

DEFAULT_SEED = bytes(16)
# measurement windows hold whole Agg groups (n <= 16) and whole R2D2 width periods (5)
WINDOW_UNIT = 80


@lru_cache(maxsize=64)
def dependency_table(seed: bytes, b: int, carriers: int) -> np.ndarray:
    """``[carriers, b, 8]`` array of covered positions (negative = warm-up)."""
    blocks = -(-carriers // _JITTER_BLOCK)
    bases = np.array([_bases(seed, j) for j in range(b)], dtype=np.int64)  # [b, 8]
    jit = np.array([[_jitter(seed, j, u) for u in range(blocks)] for j in range(b)], dtype=np.int64)  # [b, U, 4]
    jit = jit.reshape(b, blocks * _JITTER_BLOCK)[:, :carriers].T  # [carriers, b]
    pos = np.arange(carriers, dtype=np.int64)[:, None, None]
    table = pos - (bases[None, :, :] + jit[:, :, None])
    table.setflags(write=False)
    return table


_ALL8 = np.frombuffer(bytes([1] * 8), dtype=np.uint64)[0]


@lru_cache(maxsize=64)
def _padded_table(seed: bytes, b: int, carriers: int) -> np.ndarray:
    # indices into a delivery mask prefixed by WINDOW always-present warm-up slots
    t = (dependency_table(seed, b, carriers) + WINDOW).astype(np.int32)
    t.setflags(write=False)
    return t


def frame_lengths(scheme: AggScheme, payload_len: int, count: int) -> np.ndarray:
    pos = np.arange(count)
    base = HEADER_BYTES + 1 + payload_len
    if scheme.id is SchemeId.NONE:
        return np.full(count, base + 16)
    if scheme.id is SchemeId.AGG:
        return base + np.where(pos % scheme.n == scheme.n - 1, 16, 0)
    return base + r2d2_widths(scheme, count) // 8


def r2d2_widths(scheme: AggScheme, count: int) -> np.ndarray:
    """Carried tag bits per position (constant unless o is off the 50 grid)."""
    pos = np.arange(count, dtype=np.int64)
    rate = 100 + scheme.o
    return 8 * ((pos + 1) * rate // 50 - pos * rate // 50)


def security_bits(scheme: AggScheme, delivered: np.ndarray, seed: bytes = DEFAULT_SEED) -> np.ndarray:
    """Raw accumulated bits per position after the whole mask has been received."""
    delivered = np.asarray(delivered, dtype=bool)
    n_pos = len(delivered)
    if scheme.id is SchemeId.NONE:
        return np.where(delivered, TAG_BITS, 0)
    if scheme.id is SchemeId.AGG:
        n = scheme.n
        full = n_pos // n * n
        ok = delivered[:full].reshape(-1, n).all(axis=1)
        bits = np.zeros(n_pos, dtype=np.int64)
        bits[:full] = np.repeat(ok, n) * TAG_BITS
        return bits
    b = scheme.bits_per_tag
    table = _padded_table(seed, b, n_pos)
    padded = np.concatenate([np.ones(WINDOW, dtype=bool), delivered])
    present = padded[table]  # [carriers, b, 8]
    # all 8 contributors present <=> the 8 bool bytes read as one word are all 0x01
    complete = present.view(np.uint64)[..., 0] == _ALL8
    verifiable = delivered[:, None] & complete  # [carriers, b]
    widths = r2d2_widths(scheme, n_pos)
    if widths.min() < b:
        verifiable &= np.arange(b)[None, :] < widths[:, None]
    covered = table[verifiable].ravel()
    counts = np.bincount(covered, minlength=n_pos + WINDOW)[WINDOW:WINDOW + n_pos]
    return counts * delivered


def measured_window(scheme: AggScheme, count: int) -> int:
    """Positions whose covering records all fall inside ``count`` sent records."""
    tail = WINDOW if scheme.id is SchemeId.R2D2 else 0
    return max(0, (count - tail) // WINDOW_UNIT * WINDOW_UNIT)


def goodput(scheme: AggScheme, payload_len: int, delivered: np.ndarray, seed: bytes = DEFAULT_SEED) -> float:
    """Authenticated payload bytes over transmitted bytes in the measured window."""
    m = measured_window(scheme, len(delivered))
    if m == 0:
        raise ValueError("trace too short for a measurement window")
    bits = security_bits(scheme, delivered, seed)[:m]
    sent = frame_lengths(scheme, payload_len, m).sum()
    return float((bits >= TAG_BITS).sum() * payload_len / sent)
