"""Compact CBOR Content-Format for DoC questions and answers.

Question: ``[name, type?, class?]``. A missing type means AAAA and a
missing class means IN; only trailing elements may be dropped.

Response, one-array form: ``[[ttl, rdata, type?], ...]`` - the answer
section only. Owner names are dropped because the response is matched to
the request that carried the question; ``type`` is written only when it
differs from the question type.

Response, two-array form: ``[question, [[ttl, rdata, type?, name?], ...]]``.
It carries the question itself, so it decodes without request context, and
it is used whenever an answer owner differs from the question name (the
entry then spells out type and name).

Authority and additional sections are not carried.
"""

from __future__ import annotations

from . import cbor
from .dns import (
    FLAG_QR,
    FLAG_RA,
    FLAG_RD,
    DnsMessage,
    DnsName,
    DnsQuestion,
    DnsRecord,
    RClass,
    RType,
)

CONTENT_FORMAT_CBOR_DNS = 65053


class CompressionError(ValueError):
    pass


def _question_array(q: DnsQuestion) -> list:
    items: list = [str(q.name)]
    if q.rclass != RClass.IN:
        items += [q.rtype, q.rclass]
    elif q.rtype != RType.AAAA:
        items.append(q.rtype)
    return items


def _question_from_array(items) -> DnsQuestion:
    if not isinstance(items, list) or not 1 <= len(items) <= 3:
        raise CompressionError("question must be an array of 1 to 3 items")
    name, *rest = items
    if not isinstance(name, str) or not all(isinstance(v, int) and v >= 0 for v in rest):
        raise CompressionError("question array holds [text, uint?, uint?]")
    rtype = rest[0] if rest else RType.AAAA
    rclass = rest[1] if len(rest) > 1 else RClass.IN
    return DnsQuestion(DnsName.from_text(name), rtype, rclass)


def compress_query(q: DnsQuestion) -> bytes:
    return cbor.dumps(_question_array(q))


def decompress_query(data: bytes) -> DnsQuestion:
    try:
        items = cbor.loads(data)
    except cbor.CBORError as exc:
        raise CompressionError(str(exc)) from exc
    return _question_from_array(items)


def compress_response(
    msg: DnsMessage, matched_question: DnsQuestion, *, include_question: bool = False
) -> bytes:
    q = matched_question
    same_owner = all(r.name == q.name and r.rclass == RClass.IN for r in msg.answers)
    if same_owner and not include_question:
        entries = []
        for r in msg.answers:
            entry = [r.ttl, r.rdata]
            if r.rtype != q.rtype:
                entry.append(r.rtype)
            entries.append(entry)
        return cbor.dumps(entries)
    entries = []
    for r in msg.answers:
        if r.rclass != RClass.IN:
            raise CompressionError("only class IN answers can be compressed")
        entry = [r.ttl, r.rdata]
        if r.name != q.name:
            entry += [r.rtype, str(r.name)]
        elif r.rtype != q.rtype:
            entry.append(r.rtype)
        entries.append(entry)
    return cbor.dumps([_question_array(q), entries])


def _record(entry, default_name: DnsName, default_type: int) -> DnsRecord:
    if not isinstance(entry, list) or not 2 <= len(entry) <= 4:
        raise CompressionError("answer entry must be [ttl, rdata, type?, name?]")
    ttl, rdata, *rest = entry
    if not isinstance(ttl, int) or ttl < 0 or not isinstance(rdata, bytes):
        raise CompressionError("answer entry must start with uint ttl and byte-string rdata")
    rtype = rest[0] if rest else default_type
    name = DnsName.from_text(rest[1]) if len(rest) > 1 else default_name
    if not isinstance(rtype, int):
        raise CompressionError("answer type must be an unsigned integer")
    try:
        return DnsRecord(name, rtype, RClass.IN, ttl, rdata)
    except ValueError as exc:
        raise CompressionError(str(exc)) from exc


def decompress_response(data: bytes, matched_question: DnsQuestion | None = None) -> DnsMessage:
    try:
        items = cbor.loads(data)
    except cbor.CBORError as exc:
        raise CompressionError(str(exc)) from exc
    if not isinstance(items, list):
        raise CompressionError("response must be a CBOR array")
    two_array = len(items) == 2 and isinstance(items[0], list) and items[0] and isinstance(
        items[0][0], str
    )
    if two_array:
        question = _question_from_array(items[0])
        entries = items[1]
        if not isinstance(entries, list):
            raise CompressionError("second element must be the answer array")
    else:
        if matched_question is None:
            raise CompressionError("one-array response needs the request question")
        question = matched_question
        entries = items
    answers = tuple(_record(e, question.name, question.rtype) for e in entries)
    return DnsMessage(
        id=0, flags=FLAG_QR | FLAG_RD | FLAG_RA, question=question, answers=answers
    )
