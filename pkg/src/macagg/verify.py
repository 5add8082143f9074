"""Receiver-side verification ledger with buffered and optimistic delivery."""
from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional

from .auth import TAG_BITS, WINDOW, AggScheme, CarriedTag, SchemeId, TagKind, r2d2_carrier

Tagger = Callable[[int, bytes], bytes]
RefuteSink = Callable[[int, int], None]


class Status(enum.Enum):
    PENDING = "pending"
    DELIVERED = "delivered"
    DISCARDED = "discarded"
    REFUTED = "refuted"


class Mode(enum.Enum):
    BUFFERED = "buffered"
    OPTIMISTIC = "optimistic"


class Policy(enum.Enum):
    SILENT_DISCARD = "silent-discard"
    FATAL_ALERT = "fatal-alert"


class FatalAlert(Exception):
    """Raised under the fatal-alert policy when a tag check fails."""


class UnknownSequence(KeyError):
    pass


@dataclass(frozen=True)
class Delivered:
    seq: int
    payload: bytes
    bits: int


@dataclass(frozen=True)
class Verified:
    seq: int


@dataclass(frozen=True)
class Refuted:
    seqs: tuple[int, ...]
    first_suspect_seq: int
    bytes_since_first_malicious: int


@dataclass(frozen=True)
class Discarded:
    seq: int


@dataclass(frozen=True)
class Duplicate:
    seq: int
    conflict: bool = False


@dataclass(frozen=True)
class SecurityLevel:
    bits: int
    raw_bits: int
    status: Status

    @property
    def full(self) -> bool:
        return self.bits >= TAG_BITS


@dataclass
class _Entry:
    seq: int
    payload: bytes
    vtag: int
    arrival_index: int
    bits: int = 0
    status: Status = Status.PENDING
    full_at: Optional[int] = None


@dataclass
class _Check:
    members: tuple[int, ...]
    # full-tag check: expected 128-bit value; bit check: expected bit and tag positions
    expected: int
    positions: Optional[tuple[int, ...]] = None
    missing: set[int] = field(default_factory=set)

    @property
    def grant(self) -> int:
        return TAG_BITS if self.positions is None else 1


class VerifyState:
    """Accumulates security bits per record of one epoch.

    ``tagger(seq, payload)`` recomputes a record's virtual tag.  Sequence numbers
    are record sequence numbers; scheme positions are ``seq - base`` so an epoch
    whose first record is a control message can start its data at ``base=1``.
    """

    def __init__(
        self,
        scheme: AggScheme,
        tagger: Tagger,
        *,
        mode: Mode | str = Mode.BUFFERED,
        threshold_bits: int = 0,
        on_refute: Optional[RefuteSink] = None,
        policy: Policy | str = Policy.SILENT_DISCARD,
        base: int = 0,
        seed: bytes = b"",
        horizon: Optional[int] = None,
    ) -> None:
        self.scheme = scheme
        self.tagger = tagger
        self.mode = Mode(mode)
        self.threshold = TAG_BITS if self.mode is Mode.BUFFERED else threshold_bits
        self.on_refute = on_refute
        self.policy = Policy(policy)
        self.base = base
        self.seed = seed
        if horizon is None:
            horizon = scheme.n if scheme.id is SchemeId.AGG else WINDOW
        self.horizon = horizon
        self.entries: dict[int, _Entry] = {}
        self.arrivals = 0
        self._waiting: dict[int, list[_Check]] = defaultdict(list)
        self._delivery_log: list[tuple[int, int]] = []

    # -- helpers ---------------------------------------------------------

    def _present(self, seq: int) -> bool:
        return seq - self.base < 0 or seq in self.entries

    def _vtag(self, seq: int) -> int:
        if seq - self.base < 0:
            return 0
        return self.entries[seq].vtag

    def _register(self, check: _Check, events: list) -> None:
        check.missing = {m for m in check.members if not self._present(m)}
        if check.missing:
            for m in check.missing:
                self._waiting[m].append(check)
        else:
            self._evaluate(check, events)

    def _evaluate(self, check: _Check, events: list) -> None:
        if check.positions is None:
            value = 0
            for m in check.members:
                value ^= self._vtag(m)
        else:
            value = 0
            for m, p in zip(check.members, check.positions):
                value ^= (self._vtag(m) >> (TAG_BITS - 1 - p)) & 1
        if value == check.expected:
            self._grant(check.members, check.grant, events)
        else:
            self._refute(check.members, events)

    def _grant(self, members: tuple[int, ...], amount: int, events: list) -> None:
        for m in members:
            e = self.entries.get(m)
            if e is None or e.status in (Status.REFUTED, Status.DISCARDED):
                continue
            e.bits += amount
            if e.full_at is None and e.bits >= TAG_BITS:
                e.full_at = self.arrivals
                events.append(Verified(m))
            if e.status is Status.PENDING and e.bits >= self.threshold:
                self._maybe_deliver(e, events)

    def _maybe_deliver(self, e: _Entry, events: list) -> None:
        if e.status is Status.PENDING and e.bits >= self.threshold:
            e.status = Status.DELIVERED
            self._delivery_log.append((e.seq, len(e.payload)))
            events.append(Delivered(e.seq, e.payload, e.bits))

    def _refute(self, members: tuple[int, ...], events: list) -> None:
        hit = tuple(m for m in members if m in self.entries)
        first = min(hit) if hit else min(members)
        consumed = sum(n for s, n in self._delivery_log if s >= first)
        for m in hit:
            e = self.entries[m]
            e.status = Status.REFUTED
            e.bits = 0
        events.append(Refuted(hit, first, consumed))
        if self.policy is Policy.FATAL_ALERT:
            raise FatalAlert(f"tag check failed for records {hit}")
        if self.mode is Mode.OPTIMISTIC and self.on_refute is not None:
            self.on_refute(first, consumed)

    # -- public API --------------------------------------------------------

    def ingest(self, seq: int, payload: bytes, carried: CarriedTag) -> list:
        """Record one received data record and run every check it completes."""
        events: list = []
        if seq in self.entries:
            # a repeated sequence number must repeat the same bytes
            return [Duplicate(seq, self.entries[seq].payload != payload)]
        self.arrivals += 1
        e = _Entry(seq, payload, int.from_bytes(self.tagger(seq, payload), "big"), self.arrivals)
        self.entries[seq] = e
        self._maybe_deliver(e, events)

        for check in self._waiting.pop(seq, ()):
            check.missing.discard(seq)
            if not check.missing and all(self._present(m) for m in check.members):
                self._evaluate(check, events)

        pos = seq - self.base
        sid = self.scheme.id
        if carried.kind is TagKind.DUAL:
            carried = CarriedTag(carried.bits[:16], TagKind.FULL)
        if sid is SchemeId.NONE or carried.kind is TagKind.FULL:
            self._register(_Check((seq,), int.from_bytes(carried.bits[:16], "big")), events)
        elif sid is SchemeId.AGG:
            if self.scheme.is_carrier(pos) and len(carried.bits) == 16:
                members = tuple(range(seq - self.scheme.n + 1, seq + 1))
                self._register(_Check(members, int.from_bytes(carried.bits, "big")), events)
        else:
            self._ingest_r2d2(seq, pos, carried, events)
        return events

    def _ingest_r2d2(self, seq: int, pos: int, carried: CarriedTag, events: list) -> None:
        b = self.scheme.bits_per_tag
        used = self.scheme.tag_bits(pos)
        width = len(carried.bits) * 8
        if width < used:
            return  # no usable tag on this record
        tag = int.from_bytes(carried.bits, "big")
        entries, base = self.entries, self.base
        credit: dict[int, int] = {}  # grants are batched per record, flushed before any refutation
        for j, (offsets, positions) in enumerate(r2d2_carrier(self.seed, pos, used, b)):
            members = tuple(seq - d for d in offsets)
            expected = (tag >> (width - 1 - j)) & 1
            value = 0
            for m, p in zip(members, positions):
                if m - base < 0:
                    continue
                e = entries.get(m)
                if e is None:
                    break
                value ^= (e.vtag >> (TAG_BITS - 1 - p)) & 1
            else:
                if value == expected:
                    for m in members:
                        credit[m] = credit.get(m, 0) + 1
                else:
                    self._flush(credit, events)
                    self._refute(members, events)
                continue
            self._register(_Check(members, expected, positions), events)
        self._flush(credit, events)

    def _flush(self, credit: dict[int, int], events: list) -> None:
        for m, amount in credit.items():
            self._grant((m,), amount, events)
        credit.clear()

    def add_full_tag(self, seqs: list[int] | tuple[int, ...], tag: bytes) -> list:
        """Register a 128-bit XOR tag over ``seqs`` (epoch-transition tags)."""
        events: list = []
        if seqs:
            self._register(_Check(tuple(seqs), int.from_bytes(tag, "big")), events)
        return events

    def security_of(self, seq: int) -> SecurityLevel:
        e = self.entries.get(seq)
        if e is None:
            raise UnknownSequence(seq)
        return SecurityLevel(min(e.bits, TAG_BITS), e.bits, e.status)

    def expire(self, horizon: Optional[int] = None) -> list:
        """Give up on records older than ``horizon`` arrivals that are still unverified."""
        horizon = self.horizon if horizon is None else horizon
        events: list = []
        for e in self.entries.values():
            if self.arrivals - e.arrival_index <= horizon or e.bits >= TAG_BITS:
                continue
            if e.status is Status.PENDING:
                e.status = Status.DISCARDED
                events.append(Discarded(e.seq))
        return events

    def full_seqs(self) -> list[int]:
        return [s for s, e in self.entries.items() if e.bits >= TAG_BITS and e.status is not Status.REFUTED]
