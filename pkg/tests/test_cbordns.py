import pytest
from hypothesis import given
from hypothesis import strategies as st

from docstack import cbor
from docstack.cbordns import (
    CompressionError,
    compress_query,
    compress_response,
    decompress_query,
    decompress_response,
)
from docstack.dns import DnsQuestion, DnsRecord, RType, build_response

NAME24 = "abcdefghij.abcdefghij.ab"
V6 = bytes.fromhex("20010db8000000000000000000000001")


@pytest.mark.parametrize(
    "value, hexed",
    [
        (0, "00"), (23, "17"), (24, "1818"), (100, "1864"), (1000, "1903e8"),
        (1000000, "1a000f4240"), (1000000000000, "1b000000e8d4a51000"),
        (-1, "20"), (-1000, "3903e7"), (b"", "40"), (b"\x01\x02\x03\x04", "4401020304"),
        ("", "60"), ("a", "6161"), ("ü", "62c3bc"), ([], "80"), ([1, [2, 3], [4, 5]], "8301820203820405"),
        ({}, "a0"), ({1: 2, 3: 4}, "a201020304"), (False, "f4"), (True, "f5"), (None, "f6"),
    ],
)
def test_cbor_known_encodings(value, hexed):
    assert cbor.dumps(value).hex() == hexed
    assert cbor.loads(bytes.fromhex(hexed)) == value


@pytest.mark.parametrize("hexed", ["1817", "190017", "", "62c3", "8301", "f9", "0000"])
def test_cbor_rejects_bad_input(hexed):
    with pytest.raises(cbor.CBORError):
        cbor.loads(bytes.fromhex(hexed))


_items = st.recursive(
    st.integers(-(2**63), 2**64 - 1) | st.binary(max_size=40) | st.text(max_size=20) | st.booleans() | st.none(),
    lambda inner: st.lists(inner, max_size=5),
    max_leaves=20,
)


@given(_items)
def test_cbor_round_trip(item):
    assert cbor.loads(cbor.dumps(item)) == item


def _response(ttl, n=1, rtype=RType.AAAA):
    q = DnsQuestion(NAME24, rtype)
    size = 16 if rtype == RType.AAAA else 4
    records = [DnsRecord(NAME24, rtype, 1, ttl, bytes([i]) * size) for i in range(n)]
    return q, build_response(q, records)


@pytest.mark.parametrize("ttl, size", [(0, 20), (23, 20), (24, 21), (300, 22), (70000, 24)])
def test_single_aaaa_sizes(ttl, size):
    # outer array (1) + entry array (1) + uint ttl head + bstr head (1) + 16 octets
    q, msg = _response(ttl)
    assert len(compress_response(msg, q)) == size


def test_query_forms():
    assert cbor.loads(compress_query(DnsQuestion("a.b", RType.AAAA))) == ["a.b"]
    assert cbor.loads(compress_query(DnsQuestion("a.b", RType.A))) == ["a.b", 1]
    assert cbor.loads(compress_query(DnsQuestion("a.b", RType.A, 3))) == ["a.b", 1, 3]
    assert len(compress_query(DnsQuestion(NAME24, RType.AAAA))) == 1 + 2 + 24


@given(st.sampled_from(["a.b", NAME24, "x.example.org"]), st.sampled_from([1, 28, 16, 255]), st.sampled_from([1, 3]))
def test_query_round_trip(name, rtype, rclass):
    q = DnsQuestion(name, rtype, rclass)
    assert decompress_query(compress_query(q)) == q


@given(st.integers(0, 2**32 - 1), st.integers(0, 5), st.sampled_from([RType.A, RType.AAAA]))
def test_response_round_trip(ttl, n, rtype):
    q, msg = _response(ttl, n, rtype)
    back = decompress_response(compress_response(msg, q), q)
    assert back.question == q and back.answers == msg.answers
    both = decompress_response(compress_response(msg, q, include_question=True))
    assert both.answers == msg.answers


def test_foreign_owner_uses_two_array_form():
    q = DnsQuestion("www.example.org", RType.AAAA)
    cname = DnsRecord("www.example.org", RType.CNAME, 1, 60, b"\x03cdn\x00")
    target = DnsRecord("cdn", RType.AAAA, 1, 60, V6)
    msg = build_response(q, [cname, target])
    data = compress_response(msg, q)
    decoded = cbor.loads(data)
    assert decoded[0] == ["www.example.org"]
    assert decoded[1][1] == [60, V6, 28, "cdn"]
    assert decompress_response(data).answers == msg.answers


@pytest.mark.parametrize(
    "obj",
    [5, [[1]], [["ttl", b"x"]], [[1, "text"]], [[1, b"x", "t"]]],
)
def test_malformed_responses(obj):
    q = DnsQuestion("a.b", RType.A)
    with pytest.raises(CompressionError):
        decompress_response(cbor.dumps(obj), q)


def test_one_array_needs_question():
    q, msg = _response(1)
    with pytest.raises(CompressionError):
        decompress_response(compress_response(msg, q))


@pytest.mark.parametrize("obj", [[], [1], ["a", "b"], ["a", 1, 1, 1]])
def test_malformed_queries(obj):
    with pytest.raises(CompressionError):
        decompress_query(cbor.dumps(obj))
