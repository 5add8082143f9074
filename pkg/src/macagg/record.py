"""Protected record layout, sequence-number masking and per-epoch key schedule.

Wire layout of one record (all integers big-endian)::

    flags (1) | encrypted seq low byte (1) | enc(content) | carried tag bytes

``flags`` follows the DTLS 1.3 unified header with C=S=L=0: ``0b001000EE``
where ``EE`` are the two low epoch bits.  ``content`` is ``type || payload``
in the ``ct_first`` layout used after negotiation and ``payload || type`` in
the standard layout.  Encryption is a PRF keystream (no expansion, no padding).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from .auth import TAG_BYTES, prf

CT_ALERT = 21
CT_HANDSHAKE = 22
CT_APPLICATION_DATA = 23
CT_ACK = 26
CONTENT_TYPES = (CT_ALERT, CT_HANDSHAKE, CT_APPLICATION_DATA, CT_ACK)

HEADER_BYTES = 2
LINK_MTU = 127
# Chosen so a Trad record fits a 91-byte payload: 2 + 1 + 91 + 16 = 110.
LINK_OVERHEAD = 17
MASK_INPUT_BYTES = 16
MAX_EPOCH = 2**64 - 1
_FLAGS_FIXED = 0b0010_0000

LABEL_UPDATE = b"agg-update"
LABEL_ENC = b"enc"
LABEL_MAC = b"mac"
LABEL_SN = b"sn"


class CodecError(ValueError):
    pass


class SizeError(CodecError):
    pass


class ProtocolError(RuntimeError):
    pass


class Layout(enum.Enum):
    STANDARD = "standard"
    CT_FIRST = "ct_first"


@dataclass(frozen=True)
class EpochKeys:
    epoch: int
    enc_key: bytes
    mac_key: bytes
    sn_key: bytes
    secret: bytes

    @classmethod
    def from_secret(cls, secret: bytes, epoch: int = 0) -> "EpochKeys":
        return cls(
            epoch=epoch,
            enc_key=prf(secret, LABEL_ENC)[:16],
            mac_key=prf(secret, LABEL_MAC)[:16],
            sn_key=prf(secret, LABEL_SN)[:16],
            secret=secret,
        )

    @property
    def r2d2_seed(self) -> bytes:
        return prf(self.mac_key, b"r2d2-deps")[:16]


def next_epoch(keys: EpochKeys) -> EpochKeys:
    """Key schedule step shared by KeyUpdate and AggregationUpdate."""
    if keys.epoch >= MAX_EPOCH:
        raise ProtocolError("epoch counter exhausted")
    return EpochKeys.from_secret(prf(keys.secret, LABEL_UPDATE)[:16], keys.epoch + 1)


def keystream(keys: EpochKeys, seq: int, length: int) -> bytes:
    out = bytearray()
    nonce = keys.epoch.to_bytes(8, "big") + seq.to_bytes(8, "big")
    ctr = 0
    while len(out) < length:
        out += prf(keys.enc_key, nonce + ctr.to_bytes(4, "big"))
        ctr += 1
    return bytes(out[:length])


def _xor(data: bytes, stream: bytes) -> bytes:
    return (int.from_bytes(data, "big") ^ int.from_bytes(stream, "big")).to_bytes(len(data), "big") if data else b""


def seq_mask_input(ciphertext: bytes, epoch: int) -> bytes:
    """16-byte PRF input: the ciphertext prefix, or epoch || ciphertext || zeros if short."""
    if len(ciphertext) >= MASK_INPUT_BYTES:
        return ciphertext[:MASK_INPUT_BYTES]
    return (epoch.to_bytes(8, "big") + ciphertext + bytes(MASK_INPUT_BYTES))[:MASK_INPUT_BYTES]


def seq_mask(keys: EpochKeys, ciphertext: bytes, epoch: Optional[int] = None) -> bytes:
    epoch = keys.epoch if epoch is None else epoch
    return prf(keys.sn_key, seq_mask_input(ciphertext, epoch))[:2]


@dataclass(frozen=True)
class RecordFrame:
    header_flags: int
    encrypted_seq_low: int
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return bytes((self.header_flags, self.encrypted_seq_low)) + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "RecordFrame":
        if len(data) < HEADER_BYTES + 2:
            raise CodecError("record shorter than header plus two ciphertext bytes")
        if data[0] & 0b1110_0000 != _FLAGS_FIXED or data[0] & 0b0001_1100:
            raise CodecError(f"unsupported header flags {data[0]:#04x}")
        return cls(data[0], data[1], bytes(data[2:]))

    def __len__(self) -> int:
        return HEADER_BYTES + len(self.ciphertext)

    @property
    def epoch_bits(self) -> int:
        return self.header_flags & 0b11


@dataclass(frozen=True)
class DecodedRecord:
    seq: int
    content_type: int
    payload: bytes
    tag: bytes


def max_frame_bytes(mtu: int = LINK_MTU, overhead: int = LINK_OVERHEAD) -> int:
    return mtu - overhead


def encode_record(
    keys: EpochKeys,
    seq: int,
    content_type: int,
    payload: bytes,
    tag: bytes,
    layout: Layout | str = Layout.CT_FIRST,
    max_frame: int = LINK_MTU - LINK_OVERHEAD,
) -> RecordFrame:
    layout = Layout(layout)
    if not payload:
        raise CodecError("payload must be non-empty")
    if layout is Layout.STANDARD and len(tag) != TAG_BYTES:
        raise CodecError("standard layout always carries a full tag")
    if HEADER_BYTES + 1 + len(payload) + len(tag) > max_frame:
        raise SizeError(f"record of {HEADER_BYTES + 1 + len(payload) + len(tag)} bytes exceeds {max_frame}")
    inner = bytes((content_type,)) + payload if layout is Layout.CT_FIRST else payload + bytes((content_type,))
    ct = _xor(inner, keystream(keys, seq, len(inner))) + tag
    mask = seq_mask(keys, ct)
    return RecordFrame(_FLAGS_FIXED | (keys.epoch & 0b11), (seq & 0xFF) ^ mask[0], ct)


def recover_seq(low: int, expected: int) -> int:
    """Closest sequence number to ``expected`` whose low byte is ``low``."""
    cand = (max(expected, 0) & ~0xFF) | low
    options = [c for c in (cand - 256, cand, cand + 256) if c >= 0]
    return min(options, key=lambda c: (abs(c - expected), c))


def unmask_seq(keys: EpochKeys, frame: RecordFrame, expected: int) -> int:
    low = frame.encrypted_seq_low ^ seq_mask(keys, frame.ciphertext)[0]
    return recover_seq(low, expected)


def peek_content_type(keys: EpochKeys, seq: int, frame: RecordFrame, layout: Layout | str = Layout.CT_FIRST) -> int:
    """Decrypt only the content type byte."""
    layout = Layout(layout)
    if layout is not Layout.CT_FIRST:
        raise CodecError("content type is only recoverable up front in the ct_first layout")
    return frame.ciphertext[0] ^ keystream(keys, seq, 1)[0]


def decode_record(
    keys: EpochKeys,
    seq: int,
    frame: RecordFrame,
    tag_len: int,
    layout: Layout | str = Layout.CT_FIRST,
) -> DecodedRecord:
    layout = Layout(layout)
    body_len = len(frame.ciphertext) - tag_len
    if body_len < 2:
        raise CodecError("ciphertext too short for content type and payload")
    inner = _xor(frame.ciphertext[:body_len], keystream(keys, seq, body_len))
    tag = frame.ciphertext[body_len:]
    if layout is Layout.CT_FIRST:
        return DecodedRecord(seq, inner[0], inner[1:], tag)
    return DecodedRecord(seq, inner[-1], inner[:-1], tag)
