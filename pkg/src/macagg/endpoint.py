"""Data sender and receiver for one direction of a session.

The sender owns the encryption epoch and the virtual-tag history; the
receiver owns one ``VerifyState`` per decryption epoch and drives
AggregationUpdates.  Control records (AggregationUpdate, ACK) always carry a
full tag.  An epoch entered through an update starts with the ACK at record
sequence 0, so its data positions are ``seq - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .auth import (
    TAG_BYTES,
    AggScheme,
    CarriedTag,
    TagKind,
    carried_tag_for,
    compute_virtual_tag,
    transition_span,
)
from .record import (
    CT_ACK,
    CT_APPLICATION_DATA,
    CT_HANDSHAKE,
    CodecError,
    EpochKeys,
    Layout,
    RecordFrame,
    decode_record,
    encode_record,
    next_epoch,
    peek_content_type,
    unmask_seq,
)
from .session import Responder, UpdateMachine, decode_update, transition_tag
from .verify import Duplicate, Mode, Policy, Refuted, VerifyState


def _plain(content_type: int, payload: bytes) -> bytes:
    return bytes((content_type,)) + payload


@dataclass
class _SendEpoch:
    keys: EpochKeys
    scheme: AggScheme
    base: int
    next_seq: int
    history: dict[int, bytes] = field(default_factory=dict)
    dual_tail: Optional[bytes] = None

    @property
    def last_pos(self) -> int:
        return self.next_seq - 1 - self.base


class DataSender:
    """Encrypts application data under the current scheme and answers updates."""

    def __init__(self, keys: EpochKeys, scheme: AggScheme, layout: Layout = Layout.CT_FIRST) -> None:
        self.layout = layout
        self.epoch = _SendEpoch(keys, scheme, base=0, next_seq=0)
        self.responder = Responder()
        self.data_sent = 0

    @property
    def scheme(self) -> AggScheme:
        return self.epoch.scheme

    def _control(self, content_type: int, body: bytes) -> RecordFrame:
        ep = self.epoch
        seq = ep.next_seq
        ep.next_seq += 1
        tag = compute_virtual_tag(ep.keys.mac_key, ep.keys.epoch, seq, _plain(content_type, body))
        return encode_record(ep.keys, seq, content_type, body, tag, self.layout)

    def send(self, payload: bytes) -> RecordFrame:
        ep = self.epoch
        seq = ep.next_seq
        pos = seq - ep.base
        vt = compute_virtual_tag(ep.keys.mac_key, ep.keys.epoch, seq, _plain(CT_APPLICATION_DATA, payload))
        ep.history[pos] = vt
        carried = carried_tag_for(ep.scheme, ep.history, pos, ep.keys.r2d2_seed)
        tag = carried.bits
        if ep.dual_tail is not None:
            tag = tag + ep.dual_tail
            ep.dual_tail = None
        if ep.scheme.is_trad and len(ep.history) > 1:
            ep.history.pop(pos - 1, None)
        elif len(ep.history) > 64:
            ep.history.pop(pos - 64, None)
        ep.next_seq += 1
        self.data_sent += 1
        return encode_record(ep.keys, seq, CT_APPLICATION_DATA, payload, tag, self.layout)

    def on_update(self, body: bytes) -> RecordFrame:
        """Process an AggregationUpdate; returns the ACK record to send."""
        new_scheme = decode_update(body)
        old = self.epoch
        ack_body, fresh = self.responder.ack_update(
            body, old.scheme, old.history, old.next_seq - 1, old.base, old.keys.r2d2_seed)
        if not fresh:
            return self._resend_ack()
        keys = next_epoch(old.keys)
        dual = None
        if new_scheme.is_trad and not old.scheme.is_trad:
            _, dual = transition_tag(old.scheme, old.history, old.last_pos, old.keys.r2d2_seed)
        self.epoch = _SendEpoch(keys, new_scheme, base=1, next_seq=0, dual_tail=dual)
        self._ack_frame = self._control(CT_ACK, ack_body)
        return self._ack_frame

    def _resend_ack(self) -> RecordFrame:
        return self._ack_frame


@dataclass
class _RecvEpoch:
    keys: EpochKeys
    scheme: AggScheme
    base: int
    ledger: VerifyState
    highest: int = -1
    prev: Optional["_RecvEpoch"] = None
    closed: bool = False
    # transition tag and last old-epoch seq, whichever arrives first waits here
    dual_tag: Optional[bytes] = None
    prev_last: Optional[int] = None


@dataclass
class ReceiveResult:
    kind: str  # "data", "ack", "dropped"
    seq: Optional[int] = None
    epoch: Optional[int] = None
    events: list = field(default_factory=list)
    reason: str = ""
    # (epoch, events) pairs, so transition-tag events land in the right epoch
    verified: list = field(default_factory=list)


class DataReceiver:
    """Decrypts, verifies and, when asked, requests parameter changes."""

    def __init__(
        self,
        keys: EpochKeys,
        scheme: AggScheme,
        *,
        control_keys: Optional[EpochKeys] = None,
        mode: Mode | str = Mode.BUFFERED,
        threshold_bits: int = 0,
        policy: Policy | str = Policy.SILENT_DISCARD,
        on_refute: Optional[Callable[[int, int], None]] = None,
        layout: Layout = Layout.CT_FIRST,
    ) -> None:
        self.layout = layout
        self._ledger_args = dict(mode=mode, threshold_bits=threshold_bits, policy=policy, on_refute=on_refute)
        self.current = self._new_epoch(keys, scheme, base=0)
        self.epochs: dict[int, _RecvEpoch] = {keys.epoch: self.current}
        self.accepting: dict[int, _RecvEpoch] = {keys.epoch: self.current}
        self.machine = UpdateMachine()
        self.control_keys = control_keys
        self._control_seq = 0
        self.failures = 0
        self.rejected = 0

    def _new_epoch(self, keys: EpochKeys, scheme: AggScheme, base: int) -> _RecvEpoch:
        def tagger(seq: int, payload: bytes, _k=keys) -> bytes:
            return compute_virtual_tag(_k.mac_key, _k.epoch, seq, _plain(CT_APPLICATION_DATA, payload))

        ledger = VerifyState(scheme, tagger, base=base, seed=keys.r2d2_seed, **self._ledger_args)
        return _RecvEpoch(keys, scheme, base, ledger)

    # -- data path ---------------------------------------------------------

    def _tag_len(self, ep: _RecvEpoch, seq: int, content_type: int) -> int:
        if content_type != CT_APPLICATION_DATA:
            return TAG_BYTES
        pos = seq - ep.base
        n = ep.scheme.tag_bytes(pos)
        if ep.scheme.is_trad and ep.prev is not None and not ep.prev.scheme.is_trad and pos == 0:
            n += TAG_BYTES
        return n

    def receive(self, raw: bytes) -> ReceiveResult:
        try:
            frame = RecordFrame.from_bytes(raw)
        except CodecError as exc:
            self.rejected += 1
            return ReceiveResult("dropped", reason=str(exc))
        ep = next((e for e in self.accepting.values() if e.keys.epoch & 0b11 == frame.epoch_bits), None)
        if ep is None:
            self.rejected += 1
            return ReceiveResult("dropped", reason="no keys for epoch")
        seq = unmask_seq(ep.keys, frame, ep.highest + 1)
        try:
            if self.layout is Layout.STANDARD:
                # without aggregation every record carries a full tag
                rec = decode_record(ep.keys, seq, frame, TAG_BYTES, self.layout)
                ctype = rec.content_type
            else:
                ctype = peek_content_type(ep.keys, seq, frame, self.layout)
                rec = decode_record(ep.keys, seq, frame, self._tag_len(ep, seq, ctype), self.layout)
        except CodecError as exc:
            self.rejected += 1
            self.failures += 1
            return ReceiveResult("dropped", seq, ep.keys.epoch, reason=str(exc))
        if ctype == CT_APPLICATION_DATA:
            ep.highest = max(ep.highest, seq)
            return self._on_data(ep, rec)
        if ctype == CT_ACK:
            return self._on_ack(ep, rec)
        self.failures += 1
        self.rejected += 1
        return ReceiveResult("dropped", seq, ep.keys.epoch, reason=f"unexpected content type {ctype}")

    def _on_data(self, ep: _RecvEpoch, rec) -> ReceiveResult:
        if ep.scheme.is_trad and len(rec.tag) == 2 * TAG_BYTES:
            carried = CarriedTag(rec.tag, TagKind.DUAL)
        elif ep.scheme.is_trad:
            carried = CarriedTag(rec.tag, TagKind.FULL)
        elif rec.tag:
            carried = CarriedTag(rec.tag, TagKind.AGGREGATED)
        else:
            carried = CarriedTag.none()
        if ep.base and rec.seq == 0:
            return ReceiveResult("dropped", rec.seq, ep.keys.epoch, reason="data at control sequence")
        events = ep.ledger.ingest(rec.seq, rec.payload, carried)
        self.failures += sum(isinstance(e, Refuted) or (isinstance(e, Duplicate) and e.conflict) for e in events)
        verified = [(ep.keys.epoch, events)]
        if carried.kind is TagKind.DUAL and ep.prev is not None:
            ep.dual_tag = rec.tag[TAG_BYTES:]
            if ep.prev_last is not None:
                verified.append((ep.prev.keys.epoch, self._close_previous(ep, ep.dual_tag, ep.prev_last)))
        return ReceiveResult("data", rec.seq, ep.keys.epoch, events, verified=verified)

    def _on_ack(self, ep: _RecvEpoch, rec) -> ReceiveResult:
        full = compute_virtual_tag(ep.keys.mac_key, ep.keys.epoch, rec.seq, _plain(CT_ACK, rec.payload))
        if full != rec.tag:
            self.failures += 1
            return ReceiveResult("dropped", rec.seq, ep.keys.epoch, reason="bad ACK tag")
        ep.highest = max(ep.highest, rec.seq)
        last, tag = self.machine.on_ack(rec.payload)
        ep.prev_last = last
        events = self._close_previous(ep, tag if tag is not None else ep.dual_tag, last)
        # old decryption keys are dropped once the ACK proves the switch
        for e in list(self.accepting):
            if e != ep.keys.epoch:
                del self.accepting[e]
        verified = [(ep.prev.keys.epoch, events)] if ep.prev is not None else []
        return ReceiveResult("ack", rec.seq, ep.keys.epoch, events, verified=verified)

    def _close_previous(self, ep: _RecvEpoch, tag: Optional[bytes], last_seq: int) -> list:
        prev = ep.prev
        if prev is None or ep.closed or tag is None:
            return []
        span = transition_span(prev.scheme, last_seq - prev.base, prev.keys.r2d2_seed)
        ep.closed = True
        events = prev.ledger.add_full_tag([m + prev.base for m in span], tag)
        self.failures += sum(isinstance(e, Refuted) for e in events)
        return events

    # -- update path ---------------------------------------------------------

    def request_update(self, scheme: AggScheme, now: float = 0.0) -> bytes:
        """Start an update; returns the AggregationUpdate record bytes."""
        msg, keys = self.machine.request_update(scheme, self.current.keys, now)
        nxt = self._new_epoch(keys, scheme, base=1)
        nxt.prev = self.current
        self.current = nxt
        self.epochs[keys.epoch] = nxt
        self.accepting[keys.epoch] = nxt
        return self._control_record(msg)

    def poll(self, now: float) -> Optional[bytes]:
        msg = self.machine.poll(now)
        return None if msg is None else self._control_record(msg)

    def _control_record(self, msg: bytes) -> bytes:
        keys = self.control_keys
        if keys is None:
            raise RuntimeError("receiver has no keys for its own sending direction")
        seq = self._control_seq
        self._control_seq += 1
        tag = compute_virtual_tag(keys.mac_key, keys.epoch, seq, _plain(CT_HANDSHAKE, msg))
        return encode_record(keys, seq, CT_HANDSHAKE, msg, tag, self.layout).to_bytes()

    @property
    def scheme(self) -> AggScheme:
        return self.current.scheme


def open_control(keys: EpochKeys, raw: bytes, expected_seq: int, layout: Layout = Layout.CT_FIRST) -> Optional[bytes]:
    """Decrypt and verify a control record from the reverse direction."""
    try:
        frame = RecordFrame.from_bytes(raw)
        seq = unmask_seq(keys, frame, expected_seq)
        rec = decode_record(keys, seq, frame, TAG_BYTES, layout)
    except CodecError:
        return None
    if rec.content_type != CT_HANDSHAKE:
        return None
    if compute_virtual_tag(keys.mac_key, keys.epoch, seq, _plain(rec.content_type, rec.payload)) != rec.tag:
        return None
    return rec.payload
