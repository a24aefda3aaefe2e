"""DNS wire-format codec and the TTL helpers used by the caching schemes."""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum


class RType(IntEnum):
    A = 1
    NS = 2
    CNAME = 5
    SOA = 6
    PTR = 12
    MX = 15
    TXT = 16
    AAAA = 28
    SRV = 33
    OPT = 41
    HTTPS = 65
    ANY = 255


class RClass(IntEnum):
    IN = 1


FLAG_QR = 0x8000
FLAG_RD = 0x0100
FLAG_RA = 0x0080

HEADER_LEN = 12
MAX_NAME_LEN = 255
MAX_LABEL_LEN = 63
DEFAULT_MAX_RECORDS = 512

# rdata sizes that are checked on encode and decode
_FIXED_RDATA = {RType.A: 4, RType.AAAA: 16}


class DNSError(ValueError):
    pass


class DNSParseError(DNSError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


def rtype_name(code: int) -> str:
    try:
        return RType(code).name
    except ValueError:
        return f"TYPE{code}"


def parse_rtype(text: str | int) -> int:
    if isinstance(text, int):
        return text
    token = text.strip().upper()
    if token.isdigit():
        return int(token)
    if token.startswith("TYPE") and token[4:].isdigit():
        return int(token[4:])
    try:
        return RType[token].value
    except KeyError:
        raise DNSError(f"unknown record type {text!r}") from None


@dataclass(frozen=True)
class DnsName:
    labels: tuple[bytes, ...] = ()

    def __post_init__(self):
        for label in self.labels:
            if not label:
                raise DNSError("empty label inside name")
            if len(label) > MAX_LABEL_LEN:
                raise DNSError(f"label longer than {MAX_LABEL_LEN} octets")
        if self.wire_length > MAX_NAME_LEN:
            raise DNSError(f"name longer than {MAX_NAME_LEN} octets")

    @classmethod
    def from_text(cls, text: str) -> "DnsName":
        text = text.strip()
        if text in ("", "."):
            return cls(())
        if text.endswith("."):
            text = text[:-1]
        return cls(tuple(part.encode("utf-8") for part in text.split(".")))

    @property
    def wire_length(self) -> int:
        return sum(len(label) + 1 for label in self.labels) + 1

    def __str__(self) -> str:
        if not self.labels:
            return "."
        return ".".join(label.decode("utf-8", "backslashreplace") for label in self.labels)

    @property
    def text_length(self) -> int:
        """Presentation length in characters, without a trailing dot."""
        if not self.labels:
            return 0
        return sum(len(label) for label in self.labels) + len(self.labels) - 1

    def to_wire(self) -> bytes:
        out = bytearray()
        for label in self.labels:
            out.append(len(label))
            out += label
        out.append(0)
        return bytes(out)


def as_name(name: DnsName | str) -> DnsName:
    return name if isinstance(name, DnsName) else DnsName.from_text(name)


@dataclass(frozen=True)
class DnsQuestion:
    name: DnsName
    rtype: int = RType.AAAA
    rclass: int = RClass.IN

    def __post_init__(self):
        object.__setattr__(self, "name", as_name(self.name))


@dataclass(frozen=True)
class DnsRecord:
    name: DnsName
    rtype: int
    rclass: int
    ttl: int
    rdata: bytes

    def __post_init__(self):
        object.__setattr__(self, "name", as_name(self.name))
        if not 0 <= self.ttl <= 0xFFFFFFFF:
            raise DNSError(f"ttl {self.ttl} outside unsigned 32-bit range")
        expected = _FIXED_RDATA.get(self.rtype)
        if expected is not None and len(self.rdata) != expected:
            raise DNSError(
                f"{rtype_name(self.rtype)} rdata must be {expected} octets, got {len(self.rdata)}"
            )


@dataclass(frozen=True)
class DnsMessage:
    id: int = 0
    flags: int = FLAG_RD
    question: DnsQuestion | None = None
    answers: tuple[DnsRecord, ...] = ()
    authority: tuple[DnsRecord, ...] = ()
    additional: tuple[DnsRecord, ...] = field(default=())

    def __post_init__(self):
        for section in ("answers", "authority", "additional"):
            object.__setattr__(self, section, tuple(getattr(self, section)))

    @property
    def is_response(self) -> bool:
        return bool(self.flags & FLAG_QR)

    @property
    def rcode(self) -> int:
        return self.flags & 0x000F

    def records(self) -> tuple[DnsRecord, ...]:
        return self.answers + self.authority + self.additional


# -- encoding ---------------------------------------------------------------

def _encode_record(record: DnsRecord, question_name: DnsName | None) -> bytes:
    if question_name is not None and record.name == question_name:
        owner = b"\xc0\x0c"
    else:
        owner = record.name.to_wire()
    return owner + struct.pack(
        ">HHIH", record.rtype, record.rclass, record.ttl, len(record.rdata)
    ) + record.rdata


def encode_message(msg: DnsMessage) -> bytes:
    """Serialize ``msg``.

    The question name is written in full at offset 12; every record owner
    equal to it becomes a pointer to that offset. Other owner names are
    written uncompressed.
    """
    header = struct.pack(
        ">HHHHHH",
        msg.id,
        msg.flags,
        1 if msg.question else 0,
        len(msg.answers),
        len(msg.authority),
        len(msg.additional),
    )
    out = bytearray(header)
    qname = None
    if msg.question is not None:
        qname = msg.question.name
        out += qname.to_wire()
        out += struct.pack(">HH", msg.question.rtype, msg.question.rclass)
    for record in msg.records():
        out += _encode_record(record, qname)
    return bytes(out)


def encode_query(name: DnsName | str, rtype: int = RType.AAAA, id: int = 0) -> bytes:
    question = DnsQuestion(as_name(name), rtype, RClass.IN)
    return encode_message(DnsMessage(id=id, flags=FLAG_RD, question=question))


def build_response(
    question: DnsQuestion,
    records: list[DnsRecord] | tuple[DnsRecord, ...],
    id: int = 0,
    *,
    strict_types: bool = True,
) -> DnsMessage:
    if strict_types and question.rtype != RType.ANY:
        for record in records:
            if record.rtype != question.rtype and record.rtype != RType.CNAME:
                raise DNSError(
                    f"record type {rtype_name(record.rtype)} does not match question "
                    f"{rtype_name(question.rtype)}"
                )
    return DnsMessage(
        id=id,
        flags=FLAG_QR | FLAG_RD | FLAG_RA,
        question=question,
        answers=tuple(records),
    )


# -- decoding ---------------------------------------------------------------

def _read_name(data: bytes, offset: int) -> tuple[DnsName, int]:
    labels: list[bytes] = []
    end = None
    visited: set[int] = set()
    pos = offset
    total = 1
    while True:
        if pos >= len(data):
            raise DNSParseError("name runs past end of message", pos)
        length = data[pos]
        kind = length & 0xC0
        if kind == 0xC0:
            if pos + 1 >= len(data):
                raise DNSParseError("truncated compression pointer", pos)
            target = ((length & 0x3F) << 8) | data[pos + 1]
            if target in visited or target >= len(data):
                raise DNSParseError("compression pointer loop or out of range", pos)
            visited.add(target)
            if end is None:
                end = pos + 2
            pos = target
            continue
        if kind:
            raise DNSParseError(f"reserved label type 0x{kind:02x}", pos)
        if length == 0:
            if end is None:
                end = pos + 1
            break
        if length > MAX_LABEL_LEN:
            raise DNSParseError("label longer than 63 octets", pos)
        if pos + 1 + length > len(data):
            raise DNSParseError("label runs past end of message", pos)
        labels.append(bytes(data[pos + 1 : pos + 1 + length]))
        total += length + 1
        if total > MAX_NAME_LEN:
            raise DNSParseError("name longer than 255 octets", offset)
        pos += 1 + length
    return DnsName(tuple(labels)), end


def _read_record(data: bytes, offset: int) -> tuple[DnsRecord, int]:
    name, pos = _read_name(data, offset)
    if pos + 10 > len(data):
        raise DNSParseError("truncated resource record header", pos)
    rtype, rclass, ttl, rdlength = struct.unpack_from(">HHIH", data, pos)
    pos += 10
    if pos + rdlength > len(data):
        raise DNSParseError("rdata runs past end of message", pos)
    rdata = bytes(data[pos : pos + rdlength])
    expected = _FIXED_RDATA.get(rtype)
    if expected is not None and rdlength != expected:
        raise DNSParseError(f"{rtype_name(rtype)} rdata length {rdlength}", pos)
    return DnsRecord(name, rtype, rclass, ttl, rdata), pos + rdlength


def decode_message(data: bytes, *, max_records: int = DEFAULT_MAX_RECORDS) -> DnsMessage:
    """Parse a complete DNS message.

    Raises DNSParseError (with the failing offset) on truncation, pointer
    loops, bad label lengths, or when the declared record counts exceed
    ``max_records``.
    """
    if len(data) < HEADER_LEN:
        raise DNSParseError("message shorter than header", len(data))
    ident, flags, qdcount, ancount, nscount, arcount = struct.unpack_from(">HHHHHH", data, 0)
    if ancount + nscount + arcount > max_records:
        raise DNSParseError(
            f"{ancount + nscount + arcount} records exceed limit of {max_records}", 6
        )
    if qdcount > 1:
        raise DNSParseError(f"{qdcount} questions; only one is supported", 4)
    pos = HEADER_LEN
    question = None
    if qdcount:
        qname, pos = _read_name(data, pos)
        if pos + 4 > len(data):
            raise DNSParseError("truncated question", pos)
        qtype, qclass = struct.unpack_from(">HH", data, pos)
        pos += 4
        question = DnsQuestion(qname, qtype, qclass)
    sections = []
    for count in (ancount, nscount, arcount):
        records = []
        for _ in range(count):
            record, pos = _read_record(data, pos)
            records.append(record)
        sections.append(tuple(records))
    if pos != len(data):
        raise DNSParseError(f"{len(data) - pos} trailing octets", pos)
    return DnsMessage(ident, flags, question, *sections)


# -- TTL and ordering helpers --------------------------------------------------

def min_ttl(msg: DnsMessage) -> int:
    records = msg.records()
    if not records:
        raise DNSError("message carries no resource records")
    return min(record.ttl for record in records)


def rewrite_ttls(msg: DnsMessage, value: int) -> DnsMessage:
    def sub(records):
        return tuple(replace(record, ttl=value) for record in records)

    return replace(
        msg,
        answers=sub(msg.answers),
        authority=sub(msg.authority),
        additional=sub(msg.additional),
    )


def sort_records(msg: DnsMessage) -> DnsMessage:
    ordered = sorted(msg.answers, key=lambda r: (r.rtype, r.rdata))
    return replace(msg, answers=tuple(ordered))


def shuffle_records(msg: DnsMessage, rng: random.Random) -> DnsMessage:
    answers = list(msg.answers)
    rng.shuffle(answers)
    return replace(msg, answers=tuple(answers))
