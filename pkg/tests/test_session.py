import pytest
from hypothesis import given, strategies as st

from macagg.auth import AggScheme, compute_virtual_tag, xor_fold
from macagg.endpoint import DataReceiver, DataSender, open_control
from macagg.record import EpochKeys, Layout, ProtocolError, decode_record, RecordFrame, unmask_seq
from macagg.session import (
    BusyError,
    DecodeError,
    ExtensionOffer,
    ExtensionResponse,
    Responder,
    UpdateMachine,
    ack_update,
    decode_ack,
    decode_extension,
    decode_response,
    decode_update,
    encode_extension,
    encode_response,
    encode_update,
    negotiate,
    scripted_handshake,
)

SCHEMES = [AggScheme.agg(n) for n in (2, 4, 8, 16)] + [AggScheme.r2d2(o) for o in range(0, 201, 10)]
scheme_st = st.sampled_from(SCHEMES)
offer_st = st.builds(ExtensionOffer, st.lists(scheme_st, min_size=1, max_size=6).map(tuple),
                     st.lists(scheme_st, min_size=1, max_size=6).map(tuple))


def test_wire_examples():
    o = ExtensionOffer((AggScheme.agg(8),), (AggScheme.agg(16),))
    assert encode_extension(o).hex() == "0108000110"
    o = ExtensionOffer((AggScheme.r2d2(100),), (AggScheme.agg(2), AggScheme.r2d2(50)))
    assert encode_extension(o).hex() == "02080a0001020208" + "05"


@given(offer_st)
def test_extension_round_trip(offer):
    assert decode_extension(encode_extension(offer)) == offer


@pytest.mark.parametrize("data", ["03", "0108000302", "01", "0208", "010800", "0108", "00"])
def test_decode_errors(data):
    with pytest.raises(DecodeError):
        decode_extension(bytes.fromhex(data))


def test_negotiation_examples():
    offer = ExtensionOffer((AggScheme.agg(16), AggScheme.agg(8)), (AggScheme.r2d2(50),))
    assert negotiate(offer, None) is None
    r = negotiate(offer, {AggScheme.agg(8)})
    assert r == ExtensionResponse(AggScheme.agg(8), AggScheme.trad())
    assert decode_response(encode_response(r)) == r


@given(offer_st, st.sets(scheme_st), st.booleans(), st.booleans())
def test_response_subset_of_offer(offer, supported, agg_s2c, agg_c2s):
    r = negotiate(offer, supported, aggregate_s2c=agg_s2c, aggregate_c2s=agg_c2s)
    assert r.server_to_client.is_trad or r.server_to_client in offer.server_to_client
    assert r.client_to_server.is_trad or r.client_to_server in offer.client_to_server
    assert agg_s2c or r.server_to_client.is_trad


def test_unaware_server_gives_trad_session_without_aggregated_frames():
    offer = ExtensionOffer((AggScheme.agg(16),), (AggScheme.r2d2(50),))
    hs = scripted_handshake(b"psk", offer, None)
    assert hs.response is None and hs.s2c.is_trad and hs.c2s.is_trad
    assert hs.layout is Layout.STANDARD
    tx = DataSender(hs.server_keys, hs.s2c, hs.layout)
    rx = DataReceiver(hs.server_keys, hs.s2c, layout=hs.layout)
    for i in range(200):
        f = tx.send(bytes([i]) * 5)
        assert len(f.ciphertext) == 1 + 5 + 16
        rx.receive(f.to_bytes())
    assert len(rx.current.ledger.full_seqs()) == 200 and rx.failures == 0


def test_request_update_body_and_busy():
    m = UpdateMachine()
    keys = EpochKeys.from_secret(bytes(16), 3)
    msg, nk = m.request_update(AggScheme.agg(4), keys)
    assert msg[1:].hex() == "0104" and decode_update(msg) == AggScheme.agg(4)
    assert nk.epoch == 4
    with pytest.raises(BusyError):
        m.request_update(AggScheme.agg(8), keys)


def test_retransmit_and_abort():
    m = UpdateMachine()
    msg, _ = m.request_update(AggScheme.agg(4), EpochKeys.from_secret(bytes(16)), now=0.0)
    assert m.poll(0.5) is None
    t = 1.0
    for _ in range(5):
        assert m.poll(t) == msg
        t += 1.0
    with pytest.raises(ProtocolError):
        m.poll(t)


def test_agg_ack_covers_trailing_unauthenticated(rng):
    hist = {i: rng.bytes(16) for i in range(19)}  # 16 closed by two carriers, 3 trailing
    body = ack_update(encode_update(AggScheme.agg(4)), AggScheme.agg(8), hist, last_seq=18)
    last, tag = decode_ack(body)
    assert last == 18 and tag == xor_fold([hist[16], hist[17], hist[18]])
    assert decode_ack(ack_update(encode_update(AggScheme.trad()), AggScheme.agg(8), hist, 18))[1] is None


def test_duplicate_update_gets_same_ack(rng):
    hist = {i: rng.bytes(16) for i in range(10)}
    r = Responder()
    upd = encode_update(AggScheme.agg(2))
    a1, fresh1 = r.ack_update(upd, AggScheme.agg(8), hist, 9, 0, b"")
    a2, fresh2 = r.ack_update(upd, AggScheme.agg(8), hist, 9, 0, b"")
    assert fresh1 and not fresh2 and a1 == a2


def _peers(scheme):
    k = EpochKeys.from_secret(b"k" * 16, 3)
    ck = EpochKeys.from_secret(b"c" * 16, 3)
    return k, ck, DataSender(k, scheme), DataReceiver(k, scheme, control_keys=ck)


@pytest.mark.parametrize("old,new", [(AggScheme.agg(8), AggScheme.agg(4)), (AggScheme.r2d2(100), AggScheme.agg(16)),
                                     (AggScheme.agg(16), AggScheme.trad()), (AggScheme.r2d2(50), AggScheme.trad()),
                                     (AggScheme.r2d2(0), AggScheme.r2d2(200)), (AggScheme.r2d2(10), AggScheme.trad()),
                                     (AggScheme.agg(4), AggScheme.r2d2(30))])
def test_two_peer_update_lossless(old, new, rng):
    k, ck, tx, rx = _peers(old)
    for i in range(45):
        rx.receive(tx.send(rng.bytes(6)).to_bytes())
    upd = rx.request_update(new)
    ack = tx.on_update(open_control(ck, upd, 0))
    # a retransmitted update yields the identical ACK
    assert tx.on_update(open_control(ck, rx._control_record(encode_update(new)), 1)).to_bytes() == ack.to_bytes()
    assert rx.receive(ack.to_bytes()).kind == "ack"
    for i in range(60):
        res = rx.receive(tx.send(rng.bytes(6)).to_bytes())
        assert res.epoch == 4
    old_ledger = rx.epochs[3].ledger
    assert all(old_ledger.security_of(s).bits >= 128 for s in range(45))
    assert rx.failures == 0
    # the old epoch is closed for good
    stale = DataSender(k, old)
    assert rx.receive(stale.send(b"late!").to_bytes()).kind == "dropped"
