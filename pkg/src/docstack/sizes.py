"""Per-layer packet size accounting built from real encodings."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields, replace

from . import cbordns, oscore
from .coap import CoapMessage, Code, MessageType, Option, encode, encode_uint
from .dns import DnsMessage, DnsName, DnsQuestion, DnsRecord, RClass, build_response, encode_message, encode_query, parse_rtype, rtype_name
from .doc import CONTENT_FORMAT_CBOR, CONTENT_FORMAT_DNS, DocClientConfig, DocMethod, build_request, make_etag
from .netsim.link import DTLS_RECORD_OVERHEAD, LinkModel, fragment

TRANSPORTS = ("udp", "dtls", "coap", "coaps", "oscore")
METHODS = ("fetch", "get", "post")
SIZE_TOKEN = b"\x12\x34"
SIZE_MID = 0x1234
SIZE_TTL = 300


@dataclass
class SizeRow:
    transport: str
    method: str
    content_format: str
    kind: str
    rtype: str
    mac_adaptation: int
    security: int
    coap: int
    dns: int
    udp_payload: int
    total: int
    frames: int


SIZE_FIELDS = [f.name for f in fields(SizeRow)]


def sample_name(length: int) -> DnsName:
    """A name of ``length`` presentation characters made of labels up to 10 octets."""
    if length < 1:
        raise ValueError("name length must be positive")
    labels = []
    remaining = length
    while remaining > 0:
        if labels:
            remaining -= 1  # separating dot
        # never leave a single octet, which would become an empty label
        take = 9 if remaining == 11 else min(10, remaining)
        labels.append(b"abcdefghij"[:take])
        remaining -= take
    return DnsName(tuple(labels))


def _sample_rdata(rtype: int) -> bytes:
    if rtype == 1:
        return bytes([192, 0, 2, 1])
    if rtype == 28:
        return bytes.fromhex("20010db8000000000000000000000001")
    return b"\x00" * 4


def dns_messages(name: DnsName, rtype: int) -> tuple[bytes, DnsMessage]:
    question = DnsQuestion(name, rtype)
    query = encode_query(name, rtype, id=0)
    response = build_response(question, [DnsRecord(name, rtype, RClass.IN, SIZE_TTL, _sample_rdata(rtype))], 0)
    return query, response


def _response_message(payload: bytes, fmt: int, max_age: int) -> CoapMessage:
    return CoapMessage(
        mtype=MessageType.ACK,
        code=Code.CONTENT,
        message_id=SIZE_MID,
        token=SIZE_TOKEN,
        options=(
            (Option.ETAG, make_etag(payload)),
            (Option.CONTENT_FORMAT, encode_uint(fmt)),
            (Option.MAX_AGE, encode_uint(max_age)),
        ),
        payload=payload,
    )


def _oscore_pair() -> tuple[oscore.SecurityContext, oscore.SecurityContext]:
    secret = bytes(range(1, 10))
    client = oscore.derive_context(secret, b"", b"\x01", b"")
    server = oscore.derive_context(secret, b"", b"", b"\x01")
    return client, server


def _row(transport, method, fmt_name, kind, rtype, dns_octets, plain, wire, overhead, link) -> SizeRow:
    udp_payload = len(wire) + overhead
    frames = fragment(udp_payload, link)
    total = sum(frames)
    security = overhead + len(wire) - len(plain)
    return SizeRow(
        transport=transport,
        method=method,
        content_format=fmt_name,
        kind=kind,
        rtype=rtype_name(rtype),
        mac_adaptation=total - udp_payload,
        security=security,
        coap=len(plain) - dns_octets,
        dns=dns_octets,
        udp_payload=udp_payload,
        total=total,
        frames=len(frames),
    )


def size_rows(
    name_length: int = 24,
    rtype: int | str = "AAAA",
    transports=TRANSPORTS,
    methods=METHODS,
    link: LinkModel | None = None,
    content_format: str = "wire",
) -> list[SizeRow]:
    link = link or LinkModel()
    rtype = parse_rtype(rtype)
    name = sample_name(name_length)
    query, response = dns_messages(name, rtype)
    response_wire = encode_message(response)
    rows = []
    for transport in transports:
        if transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {transport!r}")
        if transport in ("udp", "dtls"):
            overhead = DTLS_RECORD_OVERHEAD if transport == "dtls" else 0
            for kind, wire in (("query", query), ("response", response_wire)):
                rows.append(_row(transport, "-", "wire", kind, rtype, len(wire), wire, wire, overhead, link))
            continue
        fmt = CONTENT_FORMAT_CBOR if content_format == "cbor" else CONTENT_FORMAT_DNS
        if content_format == "cbor":
            resp_payload = cbordns.compress_response(response, response.question)
        else:
            resp_payload = response_wire
        for method_name in methods:
            method = DocMethod.parse(method_name)
            cfg = DocClientConfig(method=method, content_format=fmt)
            req = replace(build_request(query, cfg), token=SIZE_TOKEN, message_id=SIZE_MID)
            if method is DocMethod.GET:
                dns_q = len(req.get(Option.URI_QUERY)) - len("dns=")
            else:
                dns_q = len(req.payload)
            resp = _response_message(resp_payload, fmt, SIZE_TTL)
            if method is DocMethod.POST:
                resp = resp.without(Option.ETAG)
            plain_req, plain_resp = encode(req), encode(resp)
            wire_req, wire_resp = plain_req, plain_resp
            overhead = DTLS_RECORD_OVERHEAD if transport == "coaps" else 0
            if transport == "oscore":
                client, server = _oscore_pair()
                protected = oscore.protect(req, client)
                wire_req = encode(protected)
                oscore.unprotect(protected, server)
                wire_resp = encode(oscore.protect(resp, server))
            rows.append(_row(transport, method.name.lower(), content_format, "query", rtype, dns_q,
                             plain_req, wire_req, overhead, link))
            rows.append(_row(transport, method.name.lower(), content_format, "response", rtype,
                             len(resp_payload), plain_resp, wire_resp, overhead, link))
    return rows


def rows_csv(rows: list[SizeRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SIZE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(asdict(row))
    return buf.getvalue()
