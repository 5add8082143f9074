"""Per-message virtual tags and the Trad / Agg(n) / R2D2(n, o) aggregation schemes.

Virtual tags are 128-bit HMAC-SHA256 outputs.  Aggregation is XOR based and is
only sound for pseudorandom MACs, which is why the MAC primitive is a keyed hash
and not a Carter-Wegman construction.

R2D2 dependency sets
--------------------
Each carried bit ``j`` of the frame at stream position ``i`` XORs one bit from
each of 8 earlier virtual tags at offsets ``D_j(i)``.  Offsets are built as

    D_j(i)[k] = base_j[k] + (q - perm_{j,u}[q]),   i = 4u + q

where ``base_j`` holds 8 distinct values from [4, 31] and ``perm_{j,u}`` is a
permutation of ``range(4)``; both are drawn from a PRF keyed by the session
seed.  For every slot ``(j, k)`` the map ``i -> i - D_j(i)[k]`` is a bijection,
so on a lossless stream every message is covered by exactly ``8 * b`` carried
bits, i.e. ``128 * (1 + o/100)`` bits of security.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

TAG_BITS = 128
TAG_BYTES = 16
WINDOW = 34
R2D2_CONTRIBUTORS = 8
AGG_SIZES = (2, 4, 8, 16)

_BASE_LOW, _BASE_HIGH = 4, 31
_JITTER_BLOCK = 4
ZERO_TAG = bytes(TAG_BYTES)


class ParameterError(ValueError):
    """Raised for malformed scheme parameters or inputs of the wrong shape."""


def prf(key: bytes, data: bytes) -> bytes:
    """HMAC-SHA256; the single keyed primitive used throughout the package."""
    return hmac.new(key, data, hashlib.sha256).digest()


def mac128(key: bytes, data: bytes) -> bytes:
    return prf(key, data)[:TAG_BYTES]


class SchemeId(enum.IntEnum):
    NONE = 0x00
    AGG = 0x01
    R2D2 = 0x02


@dataclass(frozen=True)
class AggScheme:
    """Negotiated aggregation scheme for one direction.

    ``SchemeId.NONE`` is traditional authentication: a full 16-byte tag per record.
    """

    id: SchemeId
    n: int = 0
    o: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "id", SchemeId(self.id))
        if self.id is SchemeId.NONE:
            if self.n not in (0, 1) or self.o is not None:
                raise ParameterError("Trad takes no parameters")
            object.__setattr__(self, "n", 0)
        elif self.id is SchemeId.AGG:
            if self.n not in AGG_SIZES:
                raise ParameterError(f"Agg(n) requires n in {AGG_SIZES}, got {self.n}")
            if self.o is not None:
                raise ParameterError("Agg(n) has no overprovisioning parameter")
        else:
            if self.n != R2D2_CONTRIBUTORS:
                raise ParameterError("R2D2 uses exactly 8 contributors per bit")
            if self.o is None or self.o % 10 or not 0 <= self.o <= 200:
                raise ParameterError(f"R2D2 overprovisioning must be a multiple of 10 in [0, 200], got {self.o}")

    @classmethod
    def trad(cls) -> "AggScheme":
        return cls(SchemeId.NONE)

    @classmethod
    def agg(cls, n: int) -> "AggScheme":
        return cls(SchemeId.AGG, n)

    @classmethod
    def r2d2(cls, o: int, n: int = R2D2_CONTRIBUTORS) -> "AggScheme":
        return cls(SchemeId.R2D2, n, o)

    @property
    def is_trad(self) -> bool:
        return self.id is SchemeId.NONE

    @property
    def bits_per_tag(self) -> int:
        """Widest carried R2D2 tag in bits, also the stride between contributor bit slots.

        ``16 * (1 + o/100)`` bits is a whole number of bytes only for o in
        {0, 50, 100, 150, 200}; other values alternate between the two
        neighbouring byte widths (see ``tag_bits``) so the mean stays exact.
        """
        if self.id is not SchemeId.R2D2:
            raise ParameterError("bits_per_tag is only defined for R2D2")
        return 8 * -(-(100 + self.o) // 50)

    def is_carrier(self, pos: int) -> bool:
        if self.id is SchemeId.AGG:
            return pos % self.n == self.n - 1
        return True

    def tag_bits(self, pos: int) -> int:
        """Bits of tag carried by the data record at stream position ``pos``."""
        if self.id is SchemeId.NONE:
            return TAG_BITS
        if self.id is SchemeId.AGG:
            return TAG_BITS if pos % self.n == self.n - 1 else 0
        # whole bytes per record; over any 5 consecutive records the total is exact
        rate = 100 + self.o
        return 8 * ((pos + 1) * rate // 50 - pos * rate // 50)

    def tag_bytes(self, pos: int) -> int:
        return self.tag_bits(pos) // 8

    @property
    def mean_tag_bytes(self) -> float:
        if self.id is SchemeId.NONE:
            return float(TAG_BYTES)
        if self.id is SchemeId.AGG:
            return TAG_BYTES / self.n
        return (100 + self.o) / 50

    @property
    def aggressiveness(self) -> float:
        """Ordering key: smaller mean tag means more aggressive aggregation."""
        return -self.mean_tag_bytes

    def __str__(self) -> str:
        if self.id is SchemeId.NONE:
            return "Trad"
        if self.id is SchemeId.AGG:
            return f"Agg({self.n})"
        return f"R2D2({self.n},{self.o})"

    @classmethod
    def parse(cls, text: str) -> "AggScheme":
        """Inverse of ``str``: ``Trad``, ``Agg(8)``, ``R2D2(8,100)``."""
        t = text.strip().replace(" ", "")
        if t.lower() in ("trad", "none"):
            return cls.trad()
        name, _, rest = t.partition("(")
        if not rest.endswith(")"):
            raise ParameterError(f"cannot parse scheme {text!r}")
        args = [int(a) for a in rest[:-1].split(",") if a]
        if name.lower() == "agg" and len(args) == 1:
            return cls.agg(args[0])
        if name.lower() == "r2d2" and len(args) == 2:
            return cls.r2d2(args[1], args[0])
        raise ParameterError(f"cannot parse scheme {text!r}")


class TagKind(enum.Enum):
    NONE = "none"
    AGGREGATED = "aggregated"
    FULL = "full"
    DUAL = "dual"


@dataclass(frozen=True)
class CarriedTag:
    bits: bytes
    kind: TagKind
    nbits: int | None = None

    def __post_init__(self) -> None:
        if self.nbits is None:
            object.__setattr__(self, "nbits", len(self.bits) * 8)
        if self.kind is TagKind.DUAL and self.nbits != 2 * TAG_BITS:
            raise ParameterError("dual tags are two full tags")
        if self.kind is TagKind.FULL and self.nbits != TAG_BITS:
            raise ParameterError("full tags are 128 bits")

    @classmethod
    def none(cls) -> "CarriedTag":
        return cls(b"", TagKind.NONE)

    def __len__(self) -> int:
        return len(self.bits)


def compute_virtual_tag(key: bytes, epoch: int, seq: int, record_plaintext: bytes) -> bytes:
    """128-bit tag over (epoch, seq, plaintext); the input to every scheme."""
    return mac128(key, epoch.to_bytes(8, "big") + seq.to_bytes(8, "big") + record_plaintext)


def xor_bytes(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


def xor_fold(tags: Iterable[bytes], width: int = TAG_BYTES) -> bytes:
    acc = 0
    for t in tags:
        acc ^= int.from_bytes(t, "big")
        width = len(t)
    return acc.to_bytes(width, "big")


def agg_aggregate(tags: Sequence[bytes], n: int | None = None) -> CarriedTag:
    if n is not None and len(tags) != n:
        raise ParameterError(f"expected {n} tags, got {len(tags)}")
    if not tags:
        raise ParameterError("nothing to aggregate")
    return CarriedTag(xor_fold(tags), TagKind.AGGREGATED)


def _draws(seed: bytes, label: bytes, count: int) -> list[int]:
    out = b""
    ctr = 0
    while len(out) < 2 * count:
        out += prf(seed, label + ctr.to_bytes(4, "big"))
        ctr += 1
    return [int.from_bytes(out[2 * i:2 * i + 2], "big") for i in range(count)]


@lru_cache(maxsize=4096)
def _bases(seed: bytes, bit_index: int) -> tuple[int, ...]:
    pool = list(range(_BASE_LOW, _BASE_HIGH + 1))
    r = _draws(seed, b"r2d2-base" + bit_index.to_bytes(4, "big"), R2D2_CONTRIBUTORS)
    for k in range(R2D2_CONTRIBUTORS):
        pick = k + r[k] % (len(pool) - k)
        pool[k], pool[pick] = pool[pick], pool[k]
    return tuple(pool[:R2D2_CONTRIBUTORS])


@lru_cache(maxsize=1 << 16)
def _jitter(seed: bytes, bit_index: int, block: int) -> tuple[int, ...]:
    perm = list(range(_JITTER_BLOCK))
    r = _draws(seed, b"r2d2-perm" + bit_index.to_bytes(4, "big") + block.to_bytes(8, "big", signed=True),
               _JITTER_BLOCK)
    for i in range(_JITTER_BLOCK - 1, 0, -1):
        j = r[i] % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return tuple(q - perm[q] for q in range(_JITTER_BLOCK))


def r2d2_dependency(seed: bytes, carrier_seq: int, bit_index: int, b: int) -> tuple[int, ...]:
    """Backward offsets of the 8 contributors to carried bit ``bit_index``."""
    if not 0 <= bit_index < b:
        raise ParameterError(f"bit index {bit_index} outside tag of {b} bits")
    block, q = divmod(carrier_seq, _JITTER_BLOCK)
    delta = _jitter(seed, bit_index, block)[q]
    return tuple(d + delta for d in _bases(seed, bit_index))


@lru_cache(maxsize=64)
def _slot_positions(b: int) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple((k * b + j) % TAG_BITS for k in range(R2D2_CONTRIBUTORS)) for j in range(b))


@lru_cache(maxsize=1 << 14)
def r2d2_carrier(seed: bytes, carrier_seq: int, width: int, b: int) -> tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]:
    """Per carried bit ``j < width``: (contributor offsets, tag bit position per contributor)."""
    if width > b:
        raise ParameterError(f"width {width} exceeds slot stride {b}")
    block, q = divmod(carrier_seq, _JITTER_BLOCK)
    slots = _slot_positions(b)
    out = []
    for j in range(width):
        delta = _jitter(seed, j, block)[q]
        out.append((tuple(d + delta for d in _bases(seed, j)), slots[j]))
    return tuple(out)


def bit_at(tag: bytes | int, pos: int, width: int = TAG_BITS) -> int:
    """MSB-first bit ``pos`` of a ``width``-bit tag."""
    v = tag if isinstance(tag, int) else int.from_bytes(tag, "big")
    return (v >> (width - 1 - pos)) & 1


def bits_to_bytes(bits: Sequence[int]) -> bytes:
    v = 0
    for x in bits:
        v = (v << 1) | x
    pad = (-len(bits)) % 8
    return (v << pad).to_bytes((len(bits) + pad) // 8, "big")


def r2d2_bit(history: Mapping[int, bytes], carrier_seq: int, offsets: Sequence[int], j: int, b: int) -> int:
    """One carried bit: XOR of bit (k*b + j) mod 128 of each contributor's tag; ``b`` is the slot stride."""
    out = 0
    for k, d in enumerate(offsets):
        m = carrier_seq - d
        if m < 0:
            continue
        out ^= bit_at(history[m], (k * b + j) % TAG_BITS)
    return out


def r2d2_aggregate(history: Mapping[int, bytes], carrier_seq: int, scheme: AggScheme, seed: bytes) -> CarriedTag:
    """Carried tag of ``b`` bits for the record at ``carrier_seq``.

    Positions below zero are warm-up contributors with all-zero virtual tags.
    """
    b = scheme.bits_per_tag
    width = scheme.tag_bits(carrier_seq)
    vtags: dict[int, int] = {}
    bits = []
    for offsets, positions in r2d2_carrier(seed, carrier_seq, width, b):
        out = 0
        for d, p in zip(offsets, positions):
            m = carrier_seq - d
            if m < 0:
                continue
            v = vtags.get(m)
            if v is None:
                v = vtags[m] = int.from_bytes(history[m], "big")
            out ^= (v >> (TAG_BITS - 1 - p)) & 1
        bits.append(out)
    return CarriedTag(bits_to_bytes(bits), TagKind.AGGREGATED, width)


def _width(b: "int | AggScheme", pos: int) -> int:
    return b if isinstance(b, int) else b.tag_bits(pos)


def r2d2_coverage(seed: bytes, b: "int | AggScheme", carrier_seq: int) -> list[tuple[int, int, int]]:
    """``(bit j, slot k, covered position)`` triples for one carrier.

    ``b`` is a fixed tag width or an R2D2 scheme whose width varies by position.
    """
    width = _width(b, carrier_seq)
    stride = b if isinstance(b, int) else b.bits_per_tag
    out = []
    for j, (offsets, _) in enumerate(r2d2_carrier(seed, carrier_seq, width, stride)):
        for k, d in enumerate(offsets):
            out.append((j, k, carrier_seq - d))
    return out


def r2d2_transition_span(seed: bytes, b: "int | AggScheme", last_pos: int) -> list[int]:
    """Positions that cannot reach 128 bits from carriers sent up to ``last_pos``.

    These are the messages the epoch-closing tag must cover.  Assumes a
    lossless link for the already sent carriers.
    """
    lo = max(0, last_pos - WINDOW + 1)
    got = {m: 0 for m in range(lo, last_pos + 1)}
    for i in range(lo + 1, last_pos + 1):
        for _, _, m in r2d2_coverage(seed, b, i):
            if m in got:
                got[m] += 1
    return [m for m in range(lo, last_pos + 1) if got[m] < TAG_BITS]


def agg_transition_span(n: int, last_pos: int) -> list[int]:
    """The trailing incomplete Agg group; empty when the last group was closed."""
    start = (last_pos + 1) // n * n
    return list(range(start, last_pos + 1))


def transition_span(scheme: AggScheme, last_pos: int, seed: bytes) -> list[int]:
    if last_pos < 0 or scheme.is_trad:
        return []
    if scheme.id is SchemeId.AGG:
        return agg_transition_span(scheme.n, last_pos)
    return r2d2_transition_span(seed, scheme, last_pos)


def carried_tag_for(scheme: AggScheme, history: Mapping[int, bytes], pos: int, seed: bytes) -> CarriedTag:
    """Tag bytes the sender appends to the data record at ``pos``."""
    if scheme.is_trad:
        return CarriedTag(history[pos], TagKind.FULL)
    if scheme.id is SchemeId.AGG:
        if not scheme.is_carrier(pos):
            return CarriedTag.none()
        return agg_aggregate([history.get(m, ZERO_TAG) for m in range(pos - scheme.n + 1, pos + 1)])
    return r2d2_aggregate(history, pos, scheme, seed)
