import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docstack.dns import (
    FLAG_QR,
    FLAG_RD,
    DNSError,
    DNSParseError,
    DnsMessage,
    DnsName,
    DnsQuestion,
    DnsRecord,
    RClass,
    RType,
    build_response,
    decode_message,
    encode_message,
    encode_query,
    min_ttl,
    parse_rtype,
    rewrite_ttls,
    rtype_name,
    shuffle_records,
    sort_records,
)

NAME24 = "abcdefghij.abcdefghij.ab"
V6 = bytes.fromhex("20010db8000000000000000000000001")


def _oracle_query(name: str, rtype: int) -> bytes:
    """Hand-assembled query built straight from the octet layout."""
    qname = b"".join(bytes([len(p)]) + p.encode() for p in name.split(".")) + b"\0"
    return struct.pack(">6H", 0, 0x0100, 1, 0, 0, 0) + qname + struct.pack(">HH", rtype, 1)


def test_query_matches_hand_assembled_octets():
    assert encode_query(NAME24, RType.AAAA) == _oracle_query(NAME24, 28)
    assert len(encode_query(NAME24)) == 42


def test_query_id_is_zero_by_default():
    assert encode_query("example.org")[:2] == b"\x00\x00"


def test_response_uses_pointer_to_question_name():
    q = DnsQuestion(NAME24, RType.AAAA)
    wire = encode_message(build_response(q, [DnsRecord(NAME24, 28, 1, 300, V6)]))
    assert len(wire) == 70
    assert wire[42:44] == b"\xc0\x0c"
    assert struct.unpack_from(">HHIH", wire, 44) == (28, 1, 300, 16)


def test_reference_sizes():
    q = DnsQuestion(NAME24, RType.A)
    a = encode_message(build_response(q, [DnsRecord(NAME24, 1, 1, 300, b"\xc0\x00\x02\x01")]))
    assert len(a) == 42 + 2 + 10 + 4
    q6 = DnsQuestion(NAME24, RType.AAAA)
    four = [DnsRecord(NAME24, 28, 1, 300, V6[:-1] + bytes([i])) for i in range(4)]
    assert len(encode_message(build_response(q6, four))) == 42 + 4 * 28


def test_name_text_and_wire_lengths():
    name = DnsName.from_text(NAME24)
    assert name.text_length == 24
    assert name.wire_length == 26
    assert DnsName.from_text("example.org.") == DnsName.from_text("example.org")
    assert str(DnsName.from_text(".")) == "."


@pytest.mark.parametrize(
    "bad",
    ["a..b", "x" * 64 + ".org", ".".join(["abcdefghi"] * 26)],
)
def test_invalid_names_rejected(bad):
    with pytest.raises(DNSError):
        DnsName.from_text(bad)


def test_rdata_length_checked():
    with pytest.raises(DNSError):
        DnsRecord("a.b", RType.AAAA, 1, 1, b"\x00" * 4)
    with pytest.raises(DNSError):
        DnsRecord("a.b", RType.A, 1, -1, b"\x00" * 4)


def test_rtype_names():
    assert parse_rtype("aaaa") == 28
    assert parse_rtype("TYPE4711") == 4711
    assert rtype_name(4711) == "TYPE4711"
    with pytest.raises(DNSError):
        parse_rtype("BOGUS")


def test_strict_types_reject_mismatch():
    q = DnsQuestion("a.b", RType.AAAA)
    with pytest.raises(DNSError):
        build_response(q, [DnsRecord("a.b", RType.A, 1, 1, b"\0" * 4)])
    build_response(q, [DnsRecord("a.b", RType.A, 1, 1, b"\0" * 4)], strict_types=False)


def test_every_truncation_raises_parse_error():
    q = DnsQuestion(NAME24, RType.AAAA)
    wire = encode_message(build_response(q, [DnsRecord(NAME24, 28, 1, 300, V6)]))
    for cut in range(len(wire)):
        with pytest.raises(DNSParseError):
            decode_message(wire[:cut])


def test_pointer_loop_rejected():
    data = struct.pack(">6H", 0, 0, 1, 0, 0, 0) + b"\xc0\x0c" + b"\x00\x01\x00\x01"
    with pytest.raises(DNSParseError) as info:
        decode_message(data)
    assert info.value.offset == 12


def test_reserved_label_type_and_trailing_bytes():
    base = struct.pack(">6H", 0, 0, 1, 0, 0, 0)
    with pytest.raises(DNSParseError):
        decode_message(base + b"\x80" + b"\x00\x01\x00\x01")
    with pytest.raises(DNSParseError):
        decode_message(encode_query("a.b") + b"\x00")


def test_record_count_limit():
    data = struct.pack(">6H", 0, FLAG_QR, 0, 0xFFFF, 0, 0)
    with pytest.raises(DNSParseError):
        decode_message(data)


def test_ttl_helpers():
    q = DnsQuestion("a.b", RType.AAAA)
    msg = build_response(q, [DnsRecord("a.b", 28, 1, t, V6) for t in (9, 4, 7)])
    assert min_ttl(msg) == 4
    assert {r.ttl for r in rewrite_ttls(msg, 0).answers} == {0}
    with pytest.raises(DNSError):
        min_ttl(DnsMessage(question=q))


_labels = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-", min_size=1, max_size=20)
_names = st.lists(_labels, min_size=1, max_size=5).map(".".join)


@st.composite
def _messages(draw):
    qname = draw(_names)
    rtype = draw(st.sampled_from([RType.A, RType.AAAA]))
    size = 4 if rtype == RType.A else 16
    records = []
    for _ in range(draw(st.integers(0, 5))):
        owner = qname if draw(st.booleans()) else draw(_names)
        records.append(
            DnsRecord(owner, rtype, RClass.IN, draw(st.integers(0, 2**32 - 1)), draw(st.binary(min_size=size, max_size=size)))
        )
    return DnsMessage(
        id=draw(st.integers(0, 0xFFFF)),
        flags=draw(st.integers(0, 0xFFFF)),
        question=DnsQuestion(qname, rtype),
        answers=records,
    )


@given(_messages())
def test_round_trip(msg):
    wire = encode_message(msg)
    assert decode_message(wire) == msg
    assert encode_message(decode_message(wire)) == wire


@given(_messages())
def test_section_counts_match_lists(msg):
    wire = encode_message(msg)
    _, _, qd, an, ns, ar = struct.unpack_from(">6H", wire)
    assert (qd, an, ns, ar) == (1, len(msg.answers), 0, 0)


@settings(max_examples=50)
@given(_messages(), st.integers(0, 2**32 - 1))
def test_sort_and_shuffle_keep_record_multiset(msg, seed):
    shuffled = shuffle_records(msg, random.Random(seed))
    assert sorted(shuffled.answers, key=repr) == sorted(msg.answers, key=repr)
    ordered = sort_records(shuffled).answers
    keys = [(r.rtype, r.rdata) for r in ordered]
    assert keys == sorted(keys)
    assert keys == [(r.rtype, r.rdata) for r in sort_records(msg).answers]


def test_query_flags():
    msg = decode_message(encode_query("example.org", RType.A))
    assert msg.flags == FLAG_RD and not msg.is_response and msg.question.rtype == RType.A
