"""DNS over CoAP: request mapping, server handler and TTL/Max-Age alignment."""

from __future__ import annotations

import base64
import enum
import hashlib
import ipaddress
import json
import math
import random
import re
from dataclasses import dataclass, replace
from pathlib import Path
from urllib.parse import quote

from . import cbordns
from .coap import Code, CoapMessage, DEFAULT_MAX_AGE, Option, path_options
from .dns import (
    DNSError,
    DnsMessage,
    DnsName,
    DnsQuestion,
    DnsRecord,
    RClass,
    build_response,
    decode_message,
    encode_message,
    min_ttl,
    parse_rtype,
    rewrite_ttls,
    shuffle_records,
    sort_records,
)

CONTENT_FORMAT_DNS = 553
CONTENT_FORMAT_CBOR = cbordns.CONTENT_FORMAT_CBOR_DNS
MAX_URI_OPTION = 255
ETAG_LENGTH = 8
RCODE_NXDOMAIN = 3


class DocError(Exception):
    pass


class DocMethod(enum.Enum):
    FETCH = Code.FETCH
    GET = Code.GET
    POST = Code.POST

    @property
    def cacheable(self) -> bool:
        return self is not DocMethod.POST

    @property
    def body_carried(self) -> bool:
        return self is not DocMethod.GET

    @property
    def blockwise_query(self) -> bool:
        return self is not DocMethod.GET

    @classmethod
    def parse(cls, text: str) -> "DocMethod":
        try:
            return cls[text.upper()]
        except KeyError:
            raise DocError(f"unknown method {text!r}") from None


class CachingScheme(enum.Enum):
    DOH_LIKE = "doh-like"
    EOL_TTLS = "eol-ttls"

    @classmethod
    def parse(cls, text: str) -> "CachingScheme":
        for member in cls:
            if member.value == text.lower().replace("_", "-"):
                return member
        raise DocError(f"unknown caching scheme {text!r}")


@dataclass(frozen=True)
class DocClientConfig:
    method: DocMethod = DocMethod.FETCH
    resource_path: str = "/dns"
    uri_template: str = "/dns{?dns}"
    content_format: int = CONTENT_FORMAT_DNS
    scheme: CachingScheme = CachingScheme.EOL_TTLS

    def __post_init__(self):
        if self.method is DocMethod.GET and len(_TEMPLATE_VAR.findall(self.uri_template)) != 1:
            raise DocError("GET needs a URI template with exactly one variable expression")


def make_etag(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:ETAG_LENGTH]


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


# -- URI templates (simple and form-style query expansion only) -------------------

_TEMPLATE_VAR = re.compile(r"\{([?]?)([A-Za-z0-9_,]+)\}")


def _pct(value: str) -> str:
    return quote(value, safe="")


def expand_template(template: str, bindings: dict[str, str]) -> tuple[str, list[str]]:
    """Expand ``template`` into a path and a list of ``name=value`` query items."""
    query: list[str] = []

    def sub(match: re.Match) -> str:
        operator, names = match.groups()
        for name in names.split(","):
            if name not in bindings:
                raise DocError(f"unbound template variable {name!r}")
        if operator == "?":
            query.extend(f"{name}={_pct(bindings[name])}" for name in names.split(","))
            return ""
        return ",".join(_pct(bindings[name]) for name in names.split(","))

    path = _TEMPLATE_VAR.sub(sub, template)
    return path, query


# -- request mapping ---------------------------------------------------------------

def _query_bytes(query: DnsMessage | bytes, content_format: int) -> bytes:
    if content_format == CONTENT_FORMAT_CBOR:
        if isinstance(query, bytes):
            query = decode_message(query)
        if query.question is None:
            raise DocError("query has no question")
        return cbordns.compress_query(query.question)
    return query if isinstance(query, bytes) else encode_message(query)


def build_request(query: DnsMessage | bytes, cfg: DocClientConfig) -> CoapMessage:
    body = _query_bytes(query, cfg.content_format)
    if cfg.method is DocMethod.GET:
        var = _TEMPLATE_VAR.search(cfg.uri_template).group(2)
        path, items = expand_template(cfg.uri_template, {var: b64url(body)})
        for item in items:
            if len(item.encode()) > MAX_URI_OPTION:
                raise DocError(
                    f"GET query needs {len(item)} octets in Uri-Query (limit {MAX_URI_OPTION}); use FETCH"
                )
        options = path_options(path) + tuple((Option.URI_QUERY, i.encode()) for i in items)
        options += ((Option.ACCEPT, _uint(cfg.content_format)),)
        return CoapMessage(code=Code.GET, options=options)
    options = path_options(cfg.resource_path) + ((Option.CONTENT_FORMAT, _uint(cfg.content_format)),)
    return CoapMessage(code=cfg.method.value, options=options, payload=body)


def _uint(value: int) -> bytes:
    return value.to_bytes((value.bit_length() + 7) // 8, "big")


# -- upstream resolver ---------------------------------------------------------------

def parse_rdata(rtype: int, data: str) -> bytes:
    if rtype == 1:
        return ipaddress.IPv4Address(data).packed
    if rtype == 28:
        return ipaddress.IPv6Address(data).packed
    if data.startswith("hex:"):
        return bytes.fromhex(data[4:])
    raw = data.encode("utf-8")
    if rtype == 16:
        return bytes([len(raw)]) + raw
    return DnsName.from_text(data).to_wire()


@dataclass
class _ZoneRecord:
    rtype: int
    rdata: bytes
    ttl_min: int
    ttl_max: int


class MockResolver:
    """Upstream resolver answering from a static zone through an aging cache.

    Each (name, type) set is filled with TTLs drawn from the configured
    bounds and then counts down in whole seconds like a recursive resolver's
    cache; once any record reaches zero the set is refilled with fresh
    draws. ``aging=False`` always returns the configured TTLs.
    """

    def __init__(self, zone: dict[str, list[_ZoneRecord]], *, rng: random.Random | None = None, aging: bool = True):
        self.zone = {DnsName.from_text(k): v for k, v in zone.items()}
        self.rng = rng or random.Random(0)
        self.aging = aging
        self._fills: dict[tuple[DnsName, int], tuple[float, list[int]]] = {}
        self.queries = 0

    @classmethod
    def from_json(cls, data: dict, **kwargs) -> "MockResolver":
        zone = {}
        for name, records in data.items():
            entries = []
            for rec in records:
                rtype = parse_rtype(rec["type"])
                lo = int(rec.get("ttl_min", rec.get("ttl", 300)))
                hi = int(rec.get("ttl_max", rec.get("ttl", lo)))
                if lo > hi:
                    raise DocError(f"{name}: ttl_min above ttl_max")
                entries.append(_ZoneRecord(rtype, parse_rdata(rtype, rec["data"]), lo, hi))
            zone[name] = entries
        return cls(zone, **kwargs)

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "MockResolver":
        return cls.from_json(json.loads(Path(path).read_text()), **kwargs)

    def knows(self, name: DnsName) -> bool:
        return name in self.zone

    def resolve(self, question: DnsQuestion, now: float = 0.0) -> list[DnsRecord] | None:
        """Records for ``question``; None means the name does not exist."""
        self.queries += 1
        entries = self.zone.get(question.name)
        if entries is None:
            return None
        matching = [e for e in entries if e.rtype == question.rtype or question.rtype == 255]
        if not matching:
            return []
        key = (question.name, question.rtype)
        fill = self._fills.get(key)
        elapsed = 0
        if fill is not None and self.aging:
            elapsed = math.floor(now - fill[0])
            if min(fill[1]) - elapsed <= 0:
                fill = None
        if fill is None:
            shared = self.rng.randint(matching[0].ttl_min, matching[0].ttl_max)
            ttls = [
                shared if (e.ttl_min, e.ttl_max) == (matching[0].ttl_min, matching[0].ttl_max)
                else self.rng.randint(e.ttl_min, e.ttl_max)
                for e in matching
            ]
            fill = (now, ttls)
            self._fills[key] = fill
            elapsed = 0
        return [
            DnsRecord(question.name, e.rtype, RClass.IN, ttl - elapsed, e.rdata)
            for e, ttl in zip(matching, fill[1])
        ]


# -- server -----------------------------------------------------------------------------

class DocServer:
    """Stateless DoC resource handler.

    Responses carry Max-Age = minimum record TTL and an ETag over the
    payload; answers are sorted so the payload does not depend on upstream
    record order. Under EOL TTLs every record TTL on the wire is 0.
    """

    def __init__(
        self,
        resolver,
        scheme: CachingScheme = CachingScheme.EOL_TTLS,
        *,
        path: str = "/dns",
        sort: bool = True,
        protected_max_age: bool = False,
    ):
        self.resolver = resolver
        self.scheme = scheme
        self.path = path
        self.sort = sort
        self.protected_max_age = protected_max_age

    def _extract_query(self, request: CoapMessage) -> tuple[bytes, int]:
        if request.code == Code.GET:
            for raw in request.get_all(Option.URI_QUERY):
                key, _, value = raw.decode("utf-8", "replace").partition("=")
                if key == "dns":
                    try:
                        body = b64url_decode(value)
                    except ValueError as exc:
                        raise DocError("query variable is not base64url") from exc
                    fmt = request.get_uint(Option.ACCEPT)
                    return body, CONTENT_FORMAT_DNS if fmt is None else fmt
            raise DocError("GET request without dns query variable")
        fmt = request.get_uint(Option.CONTENT_FORMAT)
        return request.payload, CONTENT_FORMAT_DNS if fmt is None else fmt

    def serve(self, request: CoapMessage, now: float = 0.0) -> CoapMessage:
        if request.uri_path != self.path:
            return CoapMessage(code=Code.NOT_FOUND)
        if request.code not in (Code.FETCH, Code.GET, Code.POST):
            return CoapMessage(code=Code.METHOD_NOT_ALLOWED)
        try:
            body, fmt = self._extract_query(request)
        except DocError:
            return CoapMessage(code=Code.BAD_REQUEST)
        if fmt not in (CONTENT_FORMAT_DNS, CONTENT_FORMAT_CBOR):
            return CoapMessage(code=Code.UNSUPPORTED_CONTENT_FORMAT)
        try:
            if fmt == CONTENT_FORMAT_CBOR:
                question, query_id = cbordns.decompress_query(body), 0
            else:
                query = decode_message(body)
                question, query_id = query.question, query.id
        except (DNSError, ValueError):
            return CoapMessage(code=Code.BAD_REQUEST)
        if question is None:
            return CoapMessage(code=Code.BAD_REQUEST)

        records = self.resolver.resolve(question, now)
        response = build_response(question, records or [], query_id, strict_types=False)
        if records is None:
            response = replace(response, flags=response.flags | RCODE_NXDOMAIN)
        if self.sort:
            response = sort_records(response)
        max_age = min_ttl(response) if response.records() else 0
        if self.scheme is CachingScheme.EOL_TTLS:
            response = rewrite_ttls(response, 0)
        if fmt == CONTENT_FORMAT_CBOR:
            payload = cbordns.compress_response(response, question)
        else:
            payload = encode_message(response)

        options: list[tuple[int, bytes]] = [
            (Option.CONTENT_FORMAT, _uint(fmt)),
            (Option.MAX_AGE, _uint(max_age)),
        ]
        if request.code != Code.POST:
            etag = make_etag(payload)
            options.append((Option.ETAG, etag))
            if etag in request.get_all(Option.ETAG):
                return CoapMessage(
                    code=Code.VALID,
                    options=((Option.ETAG, etag), (Option.MAX_AGE, _uint(max_age))),
                )
        return CoapMessage(code=Code.CONTENT, options=tuple(options), payload=payload)

    def revalidate(self, request: CoapMessage, now: float = 0.0) -> CoapMessage:
        if not request.has(Option.ETAG):
            raise DocError("revalidation request carries no ETag")
        return self.serve(request, now)


# -- client-side processing -----------------------------------------------------------

def decode_payload(resp: CoapMessage, question: DnsQuestion) -> DnsMessage:
    fmt = resp.get_uint(Option.CONTENT_FORMAT)
    if fmt == CONTENT_FORMAT_CBOR:
        return cbordns.decompress_response(resp.payload, question)
    return decode_message(resp.payload)


def accept_response(
    resp: CoapMessage,
    scheme: CachingScheme,
    sent_query: DnsMessage,
    *,
    rng: random.Random | None = None,
) -> DnsMessage:
    """Turn a 2.05 DoC response into the message handed to the local DNS cache."""
    if resp.code != Code.CONTENT:
        raise DocError(f"cannot accept response code {resp.code >> 5}.{resp.code & 0x1F:02d}")
    try:
        msg = decode_payload(resp, sent_query.question)
    except (DNSError, ValueError) as exc:
        raise DocError(f"undecodable DNS payload: {exc}") from exc
    q, sent = msg.question, sent_query.question
    if q is None or sent is None or (q.name, q.rtype, q.rclass) != (sent.name, sent.rtype, sent.rclass):
        raise DocError("response question does not match the query")
    max_age = resp.max_age
    if max_age is None:
        max_age = DEFAULT_MAX_AGE
    if msg.records():
        if scheme is CachingScheme.EOL_TTLS:
            msg = rewrite_ttls(msg, max_age)
        else:
            elapsed = max(0, min_ttl(msg) - max_age)
            msg = _age(msg, elapsed)
    if rng is not None:
        msg = shuffle_records(msg, rng)
    return msg


def _age(msg: DnsMessage, elapsed: int) -> DnsMessage:
    def sub(records):
        return tuple(replace(r, ttl=max(0, r.ttl - elapsed)) for r in records)

    return replace(msg, answers=sub(msg.answers), authority=sub(msg.authority), additional=sub(msg.additional))


def check_max_age_consistency(outer_max_age: int, protected_max_age: int) -> bool:
    """True when the outer (proxy-adjustable) Max-Age does not extend the protected one."""
    return outer_max_age <= protected_max_age
