"""Aggregation extension, negotiation and the AggregationUpdate / ACK exchange."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .auth import (
    TAG_BYTES,
    ZERO_TAG,
    AggScheme,
    ParameterError,
    SchemeId,
    prf,
    transition_span,
    xor_fold,
)
from .record import EpochKeys, Layout, ProtocolError, next_epoch

EXTENSION_TYPE = 0x64
HS_AGGREGATION_UPDATE = 0x1A
SEPARATOR = 0x00
RETRANSMIT_TIMEOUT = 1.0
MAX_RETRIES = 5


class DecodeError(ValueError):
    pass


class BusyError(RuntimeError):
    """An AggregationUpdate is already outstanding in this direction."""


@dataclass(frozen=True)
class ExtensionOffer:
    server_to_client: tuple[AggScheme, ...]
    client_to_server: tuple[AggScheme, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "server_to_client", tuple(self.server_to_client))
        object.__setattr__(self, "client_to_server", tuple(self.client_to_server))
        for lst in (self.server_to_client, self.client_to_server):
            if not lst:
                raise ParameterError("offer lists must be non-empty")
            if any(s.is_trad for s in lst):
                raise ParameterError("0x00 cannot be offered; it is the list separator")


@dataclass(frozen=True)
class ExtensionResponse:
    server_to_client: AggScheme
    client_to_server: AggScheme


def encode_entry(scheme: AggScheme) -> bytes:
    if scheme.id is SchemeId.NONE:
        return bytes((0,))
    if scheme.id is SchemeId.AGG:
        return bytes((scheme.id, scheme.n))
    return bytes((scheme.id, scheme.n, scheme.o // 10))


def _decode_entry(data: bytes, i: int) -> tuple[AggScheme, int]:
    sid = data[i]
    try:
        if sid == SchemeId.NONE:
            return AggScheme.trad(), i + 1
        if sid == SchemeId.AGG:
            if i + 2 > len(data):
                raise DecodeError("truncated Agg entry")
            return AggScheme.agg(data[i + 1]), i + 2
        if sid == SchemeId.R2D2:
            if i + 3 > len(data):
                raise DecodeError("truncated R2D2 entry")
            return AggScheme.r2d2(data[i + 2] * 10, data[i + 1]), i + 3
    except ParameterError as exc:
        raise DecodeError(str(exc)) from exc
    raise DecodeError(f"scheme identifier {sid:#04x} is reserved")


def decode_entry(data: bytes) -> AggScheme:
    scheme, end = _decode_entry(data, 0)
    if end != len(data):
        raise DecodeError("trailing bytes after scheme entry")
    return scheme


def encode_extension(offer: ExtensionOffer) -> bytes:
    """``s->c entries || 0x00 || c->s entries``."""
    return (b"".join(map(encode_entry, offer.server_to_client)) + bytes((SEPARATOR,))
            + b"".join(map(encode_entry, offer.client_to_server)))


def decode_extension(data: bytes) -> ExtensionOffer:
    lists: list[list[AggScheme]] = [[]]
    i = 0
    while i < len(data):
        if data[i] == SEPARATOR:
            if len(lists) == 2:
                raise DecodeError("more than one direction separator")
            lists.append([])
            i += 1
            continue
        scheme, i = _decode_entry(data, i)
        lists[-1].append(scheme)
    if len(lists) != 2 or not lists[0] or not lists[1]:
        raise DecodeError("offer must list schemes for both directions")
    return ExtensionOffer(tuple(lists[0]), tuple(lists[1]))


def encode_response(resp: ExtensionResponse) -> bytes:
    return encode_entry(resp.server_to_client) + bytes((SEPARATOR,)) + encode_entry(resp.client_to_server)


def decode_response(data: bytes) -> ExtensionResponse:
    s2c, i = _decode_entry(data, 0)
    if i >= len(data) or data[i] != SEPARATOR:
        raise DecodeError("missing direction separator")
    c2s, j = _decode_entry(data, i + 1)
    if j != len(data):
        raise DecodeError("trailing bytes after response")
    return ExtensionResponse(s2c, c2s)


def extension_block(data: bytes) -> bytes:
    """TLS extension framing: type (2) || length (2) || data."""
    return EXTENSION_TYPE.to_bytes(2, "big") + len(data).to_bytes(2, "big") + data


def _pick(offered: Sequence[AggScheme], supported: Iterable[AggScheme], policy: Optional[Sequence[AggScheme]]) -> AggScheme:
    supported = set(supported)
    candidates = [s for s in offered if s in supported]
    if not candidates:
        return AggScheme.trad()
    if policy:
        rank = {s: r for r, s in enumerate(policy)}
        return min(candidates, key=lambda s: (rank.get(s, len(rank)), candidates.index(s)))
    return candidates[0]


def negotiate(
    offer: Optional[ExtensionOffer],
    server_supported: Optional[Iterable[AggScheme]],
    server_policy: Optional[Sequence[AggScheme]] = None,
    *,
    aggregate_s2c: bool = True,
    aggregate_c2s: bool = True,
) -> Optional[ExtensionResponse]:
    """Server side selection; ``None`` means the extension is not understood."""
    if offer is None or server_supported is None:
        return None
    supported = list(server_supported)
    s2c = _pick(offer.server_to_client, supported, server_policy) if aggregate_s2c else AggScheme.trad()
    c2s = _pick(offer.client_to_server, supported, server_policy) if aggregate_c2s else AggScheme.trad()
    return ExtensionResponse(s2c, c2s)


# -- scripted handshake -------------------------------------------------------


@dataclass(frozen=True)
class TranscriptEntry:
    sender: str
    message: str
    body: bytes
    layout: Layout


@dataclass
class HandshakeResult:
    response: Optional[ExtensionResponse]
    client_keys: EpochKeys  # client -> server traffic
    server_keys: EpochKeys  # server -> client traffic
    transcript: list[TranscriptEntry] = field(default_factory=list)

    @property
    def s2c(self) -> AggScheme:
        return self.response.server_to_client if self.response else AggScheme.trad()

    @property
    def c2s(self) -> AggScheme:
        return self.response.client_to_server if self.response else AggScheme.trad()

    @property
    def layout(self) -> Layout:
        """Record layout for application data after the handshake."""
        return self.transcript[-1].layout


def scripted_handshake(
    psk: bytes,
    offer: Optional[ExtensionOffer],
    server_supported: Optional[Iterable[AggScheme]],
    server_policy: Optional[Sequence[AggScheme]] = None,
) -> HandshakeResult:
    """Stand-in for the DTLS handshake: exchange only the extension payloads.

    Keys for both directions are derived from the pre-shared secret.  Records
    switch to the ``ct_first`` layout right after the server's
    EncryptedExtensions if aggregation was agreed for at least one direction.
    """
    response = negotiate(offer, server_supported, server_policy)
    agreed = response is not None and not (response.server_to_client.is_trad and response.client_to_server.is_trad)
    after = Layout.CT_FIRST if agreed else Layout.STANDARD
    ext = extension_block(encode_extension(offer)) if offer is not None else b""
    transcript = [
        TranscriptEntry("client", "ClientHello", ext, Layout.STANDARD),
        TranscriptEntry("server", "ServerHello", b"", Layout.STANDARD),
        TranscriptEntry("server", "EncryptedExtensions",
                        extension_block(encode_response(response)) if response else b"", Layout.STANDARD),
        TranscriptEntry("server", "Finished", b"", after),
        TranscriptEntry("client", "Finished", b"", after),
    ]
    ck = EpochKeys.from_secret(prf(psk, b"c ap traffic")[:16], 3)
    sk = EpochKeys.from_secret(prf(psk, b"s ap traffic")[:16], 3)
    return HandshakeResult(response, ck, sk, transcript)


# -- AggregationUpdate ----------------------------------------------------------


def encode_update(scheme: AggScheme) -> bytes:
    return bytes((HS_AGGREGATION_UPDATE,)) + encode_entry(scheme)


def decode_update(data: bytes) -> AggScheme:
    if not data or data[0] != HS_AGGREGATION_UPDATE:
        raise DecodeError("not an AggregationUpdate")
    return decode_entry(data[1:])


def encode_ack(last_prev_epoch_seq: int, transition_tag: Optional[bytes]) -> bytes:
    return last_prev_epoch_seq.to_bytes(8, "big", signed=True) + (transition_tag or b"")


def decode_ack(data: bytes) -> tuple[int, Optional[bytes]]:
    if len(data) not in (8, 8 + TAG_BYTES):
        raise DecodeError(f"ACK body of {len(data)} bytes")
    return int.from_bytes(data[:8], "big", signed=True), (data[8:] or None)


def transition_tag(
    scheme: AggScheme, history: Mapping[int, bytes], last_pos: int, seed: bytes
) -> tuple[list[int], bytes]:
    """Span of not yet authenticated positions and their XOR tag."""
    span = transition_span(scheme, last_pos, seed)
    return span, xor_fold((history.get(m, ZERO_TAG) for m in span), TAG_BYTES)


@dataclass
class PendingUpdate:
    scheme: AggScheme
    message: bytes
    deadline: float
    retries: int = 0


@dataclass
class UpdateMachine:
    """Initiator state for one direction: the data receiver asks its peer to switch.

    The responder needs no state beyond the last ACK it sent; see ``Responder``.
    """

    role: str = "initiator"
    timeout: float = RETRANSMIT_TIMEOUT
    max_retries: int = MAX_RETRIES
    pending: Optional[PendingUpdate] = None
    last_prev_epoch_seq: Optional[int] = None

    def request_update(self, new_scheme: AggScheme, keys: EpochKeys, now: float = 0.0) -> tuple[bytes, EpochKeys]:
        """Build the update message and the decryption keys of the next epoch."""
        if self.pending is not None:
            raise BusyError("an AggregationUpdate is already outstanding")
        msg = encode_update(new_scheme)
        self.pending = PendingUpdate(new_scheme, msg, now + self.timeout)
        return msg, next_epoch(keys)

    def poll(self, now: float) -> Optional[bytes]:
        """Message to retransmit if the ACK timer expired."""
        p = self.pending
        if p is None or now < p.deadline:
            return None
        if p.retries >= self.max_retries:
            raise ProtocolError("AggregationUpdate not acknowledged; aborting connection")
        p.retries += 1
        p.deadline = now + self.timeout
        return p.message

    def on_ack(self, body: bytes) -> tuple[int, Optional[bytes]]:
        last, tag = decode_ack(body)
        if self.pending is not None:
            self.last_prev_epoch_seq = last
            self.pending = None
        return last, tag

    @property
    def busy(self) -> bool:
        return self.pending is not None


@dataclass
class Responder:
    """Data-sender side: answers updates and remembers the ACK for duplicates."""

    last_ack: Optional[bytes] = None
    last_update: Optional[bytes] = None

    def ack_update(
        self,
        update: bytes,
        old_scheme: AggScheme,
        history: Mapping[int, bytes],
        last_seq: int,
        base: int,
        seed: bytes,
    ) -> tuple[bytes, bool]:
        """ACK body for ``update``; second value is False for a duplicate."""
        if update == self.last_update and self.last_ack is not None:
            return self.last_ack, False
        new_scheme = decode_update(update)
        if new_scheme.is_trad:
            tag = None
        else:
            _, tag = transition_tag(old_scheme, history, last_seq - base, seed)
        self.last_update = update
        self.last_ack = encode_ack(last_seq, tag)
        return self.last_ack, True


def ack_update(
    update: bytes,
    old_scheme: AggScheme,
    history: Mapping[int, bytes],
    last_seq: int,
    base: int = 0,
    seed: bytes = b"",
) -> bytes:
    """Stateless form of ``Responder.ack_update``."""
    return Responder().ack_update(update, old_scheme, history, last_seq, base, seed)[0]
