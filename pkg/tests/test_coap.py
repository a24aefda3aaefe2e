import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from docstack.coap import (
    BlockOption,
    CoAPError,
    CoapMessage,
    Code,
    Event,
    Exchange,
    MessageType,
    Option,
    Outcome,
    TransmissionParams,
    code_text,
    decode,
    decode_block,
    encode,
    encode_block,
    retransmission_schedule,
    slice_body,
)


def test_known_datagram():
    msg = CoapMessage(MessageType.CON, Code.GET, 0x1234, b"\x01", ((Option.URI_PATH, b"dns"),))
    assert encode(msg) == bytes.fromhex("41011234" "01" "b3646e73")


def test_extended_delta_and_length():
    long_uri = "coap://[2001:db8::1]/" + "x" * 300
    msg = CoapMessage(code=Code.FETCH, options=((Option.PROXY_URI, long_uri.encode()), (Option.ECHO, b"12345678")))
    wire = encode(msg)
    # Proxy-Uri: delta 35 -> nibble 13 (+22), length 321 -> nibble 14 (+52)
    assert wire[4] == 0xDE and wire[5] == 22 and wire[6:8] == (321 - 269).to_bytes(2, "big")
    assert decode(wire) == msg


def test_code_text():
    assert code_text(Code.CONTENT) == "2.05"
    assert code_text(Code.VALID) == "2.03"
    assert code_text(Code.GATEWAY_TIMEOUT) == "5.04"


@pytest.mark.parametrize(
    "data",
    [
        b"\x41\x01",  # short header
        b"\x81\x01\x00\x00\x00",  # version 2
        b"\x49\x01\x00\x00" + b"\0" * 9,  # token length 9
        b"\x44\x01\x00\x00\x01",  # truncated token
        b"\x40\x01\x00\x00\xf0",  # nibble 15 without payload marker semantics
        b"\x40\x01\x00\x00\xff",  # marker without payload
        b"\x40\x01\x00\x00\x13ab",  # option value past end
        b"\x41\x00\x00\x00\x01",  # empty message with token
    ],
)
def test_malformed_datagrams(data):
    with pytest.raises(CoAPError):
        decode(data)


_options = st.lists(
    st.tuples(st.sampled_from(list(Option)), st.binary(max_size=300)),
    max_size=6,
)


@given(
    st.sampled_from(list(MessageType)),
    st.sampled_from([c for c in Code if c != Code.EMPTY]),
    st.integers(0, 0xFFFF),
    st.binary(max_size=8),
    _options,
    st.binary(max_size=200),
)
def test_round_trip(mtype, code, mid, token, options, payload):
    msg = CoapMessage(mtype, code, mid, token, tuple(options), payload)
    assert decode(encode(msg)) == msg


def test_repeated_options_keep_order():
    msg = CoapMessage(code=Code.GET, options=((Option.URI_PATH, b"b"), (Option.ETAG, b"1"), (Option.URI_PATH, b"c")))
    assert msg.uri_path == "/b/c"
    assert decode(encode(msg)).get_all(Option.URI_PATH) == [b"b", b"c"]


def test_block_values():
    assert encode_block(BlockOption(0, True, 1)) == 0x09
    assert encode_block(BlockOption(1, True, 1)) == 25
    assert encode_block(BlockOption(2, False, 1)) == 33
    assert decode_block(33) == BlockOption(2, False, 1)
    assert BlockOption.for_size(3, False, 1024).szx == 6
    with pytest.raises(CoAPError):
        BlockOption(0, False, 7)
    with pytest.raises(CoAPError):
        slice_body(b"x", 48)


@given(st.binary(max_size=2000), st.sampled_from([16, 32, 64, 128, 256, 512, 1024]))
def test_slice_body_properties(body, size):
    blocks = slice_body(body, size)
    assert b"".join(chunk for _, chunk in blocks) == body
    assert [b.num for b, _ in blocks] == list(range(len(blocks)))
    assert all(b.more for b, _ in blocks[:-1]) and not blocks[-1][0].more
    assert all(len(chunk) == size for _, chunk in blocks[:-1])
    for block, _ in blocks:
        assert decode_block(encode_block(block)) == block


@given(st.integers(0, 2**32))
def test_retransmission_schedule_envelope(seed):
    offsets = retransmission_schedule(TransmissionParams(), random.Random(seed))
    assert len(offsets) == 4
    for k, offset in enumerate(offsets, start=1):
        assert 2 * (2**k - 1) <= offset <= 3 * (2**k - 1)


def _drive(exchange: Exchange) -> list[tuple[float, Outcome]]:
    trace = []
    while not exchange.finished:
        now = exchange.deadline
        trace.append((now, exchange.step(Event.TIMEOUT, now)))
    return trace


def test_exchange_gives_up_after_four_retransmissions():
    ex = Exchange.start(b"t", 1, b"d", TransmissionParams(), random.Random(5), 0.0)
    t0 = ex.timeout
    trace = _drive(ex)
    assert [o for _, o in trace] == [Outcome.RETRANSMIT] * 4 + [Outcome.FAIL]
    assert [round(t / t0, 9) for t, _ in trace] == [1, 3, 7, 15, 31]
    assert ex.cause == "timeout" and ex.attempt == 4


def test_exchange_early_timer_and_ack():
    ex = Exchange.start(b"t", 1, b"d", TransmissionParams(), random.Random(1), 0.0)
    assert ex.step(Event.TIMEOUT, ex.deadline - 0.1) is Outcome.CONTINUE
    assert ex.step(Event.ACK, 1.0) is Outcome.COMPLETE
    with pytest.raises(CoAPError):
        ex.step(Event.TIMEOUT, 100.0)


def test_exchange_reset_fails():
    ex = Exchange.start(b"t", 1, b"d", TransmissionParams(), random.Random(1), 0.0)
    assert ex.step(Event.RESET, 0.5) is Outcome.FAIL
    assert ex.cause == "reset"


def test_transmission_params_validated():
    with pytest.raises(CoAPError):
        TransmissionParams(random_factor=0.5)
    with pytest.raises(CoAPError):
        TransmissionParams(max_retransmit=-1)


def test_message_helpers():
    msg = CoapMessage(code=Code.CONTENT).with_option(Option.MAX_AGE, 300)
    assert msg.max_age == 300
    assert msg.set_option(Option.MAX_AGE, 5).get_all(Option.MAX_AGE) == [b"\x05"]
    assert not msg.without(Option.MAX_AGE).has(Option.MAX_AGE)
    with pytest.raises(CoAPError):
        CoapMessage(token=b"123456789")
