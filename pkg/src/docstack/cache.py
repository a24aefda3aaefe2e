"""CoAP response cache with the Max-Age freshness model, and a caching forward proxy."""

from __future__ import annotations

import enum
import hashlib
import ipaddress
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Any, Callable
from urllib.parse import unquote, urlsplit

from . import cbor
from .coap import Code, CoapMessage, DEFAULT_MAX_AGE, Option, encode_uint, path_options

# Options that select the resource representation.
KEY_OPTIONS = (
    Option.URI_HOST,
    Option.URI_PORT,
    Option.URI_PATH,
    Option.URI_QUERY,
    Option.CONTENT_FORMAT,
    Option.ACCEPT,
    Option.PROXY_URI,
    Option.PROXY_SCHEME,
)
DEFAULT_CAPACITY = 64
DEFAULT_GRACE = 300.0
COAP_PORT = 5683


def cache_key(req: CoapMessage) -> bytes | None:
    """Digest identifying the cached resource, or None when the request is uncacheable."""
    if req.code not in (Code.GET, Code.FETCH):
        return None
    options = [[num, value] for num, value in req.options if num in KEY_OPTIONS]
    payload = req.payload if req.code == Code.FETCH else b""
    return hashlib.sha256(cbor.dumps([int(req.code), options, payload])).digest()


class Freshness(enum.Enum):
    FRESH = "fresh"
    STALE = "stale"
    MISS = "miss"


@dataclass
class CacheEntry:
    key: bytes
    code: int
    options: tuple[tuple[int, bytes], ...]
    payload: bytes
    etag: bytes | None
    initial_max_age: int
    stored_at: float
    last_used: float = 0.0

    def residual(self, now: float) -> int:
        return max(0, math.floor(self.initial_max_age - (now - self.stored_at)))

    def is_fresh(self, now: float) -> bool:
        return self.initial_max_age - (now - self.stored_at) > 0

    def response(self, now: float) -> CoapMessage:
        """The stored representation with Max-Age set to the residual lifetime."""
        msg = CoapMessage(code=self.code, options=self.options, payload=self.payload)
        return msg.set_option(Option.MAX_AGE, self.residual(now))

    def to_json(self, now: float) -> dict:
        return {
            "key": self.key.hex(),
            "code": f"{self.code >> 5}.{self.code & 0x1F:02d}",
            "etag": self.etag.hex() if self.etag else None,
            "initial_max_age": self.initial_max_age,
            "stored_at": self.stored_at,
            "residual": self.residual(now),
            "payload": self.payload.hex(),
        }


class CoapCache:
    """Response cache keyed by :func:`cache_key`.

    Entries past their Max-Age stay available for revalidation until the
    grace period runs out. Capacity is enforced least-recently-used.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, grace: float = DEFAULT_GRACE):
        if capacity < 1:
            raise ValueError("cache capacity must be positive")
        self.capacity = capacity
        self.grace = grace
        self._entries: OrderedDict[bytes, CacheEntry] = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: bytes) -> bool:
        return key in self._entries

    def get(self, key: bytes) -> CacheEntry | None:
        return self._entries.get(key)

    def lookup(self, key: bytes | None, now: float) -> tuple[Freshness, CacheEntry | None]:
        if key is None:
            return Freshness.MISS, None
        entry = self._entries.get(key)
        if entry is None:
            return Freshness.MISS, None
        self._entries.move_to_end(key)
        entry.last_used = now
        if entry.is_fresh(now):
            return Freshness.FRESH, entry
        return Freshness.STALE, entry

    def store(self, key: bytes | None, response: CoapMessage, now: float) -> CacheEntry | None:
        if key is None or response.code != Code.CONTENT:
            return None
        max_age = response.max_age
        entry = CacheEntry(
            key=key,
            code=response.code,
            options=tuple(o for o in response.options if o[0] not in (Option.MAX_AGE, Option.BLOCK2)),
            payload=response.payload,
            etag=response.get(Option.ETAG),
            initial_max_age=DEFAULT_MAX_AGE if max_age is None else max_age,
            stored_at=now,
            last_used=now,
        )
        self._entries[key] = entry
        self._entries.move_to_end(key)
        self.evict(now)
        return entry

    def refresh(self, key: bytes, valid: CoapMessage, now: float) -> CacheEntry | None:
        """Apply a 2.03 Valid: restart the lifetime with the new Max-Age."""
        entry = self._entries.get(key)
        if entry is None or valid.code != Code.VALID:
            return None
        etag = valid.get(Option.ETAG)
        if etag is not None and etag != entry.etag:
            return None
        max_age = valid.max_age
        entry.initial_max_age = DEFAULT_MAX_AGE if max_age is None else max_age
        entry.stored_at = now
        entry.last_used = now
        self._entries.move_to_end(key)
        return entry

    def evict(self, now: float) -> list[bytes]:
        removed = [
            k for k, e in self._entries.items() if now - e.stored_at - e.initial_max_age > self.grace
        ]
        for k in removed:
            del self._entries[k]
        while len(self._entries) > self.capacity:
            removed.append(self._entries.popitem(last=False)[0])
        return removed

    def dump(self, now: float) -> list[dict]:
        return [e.to_json(now) for e in self._entries.values()]


# -- proxy ---------------------------------------------------------------------------

class ProxyError(ValueError):
    pass


@dataclass(frozen=True)
class ProxyTarget:
    scheme: str
    host: str
    port: int
    path: str
    query: tuple[str, ...]


def parse_proxy_uri(uri: str) -> ProxyTarget:
    try:
        parts = urlsplit(uri)
        port = parts.port
    except ValueError as exc:
        raise ProxyError(f"malformed Proxy-Uri: {exc}") from exc
    if parts.scheme != "coap":
        raise ProxyError(f"unsupported Proxy-Uri scheme {parts.scheme!r}")
    if not parts.hostname:
        raise ProxyError("Proxy-Uri without host")
    if parts.fragment:
        raise ProxyError("Proxy-Uri must not carry a fragment")
    query = tuple(q for q in parts.query.split("&") if q) if parts.query else ()
    return ProxyTarget("coap", parts.hostname, port or COAP_PORT, parts.path or "/", query)


def format_proxy_uri(host: str, path: str, port: int = COAP_PORT) -> str:
    try:
        if ipaddress.ip_address(host).version == 6:
            host = f"[{host}]"
    except ValueError:
        pass
    netloc = host if port == COAP_PORT else f"{host}:{port}"
    return f"coap://{netloc}{path}"


def _is_ip_literal(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
        return True
    except ValueError:
        return False


def upstream_request(req: CoapMessage, target: ProxyTarget) -> CoapMessage:
    """Rewrite a proxy request into the request sent to the origin."""
    options = [o for o in req.options if o[0] not in (Option.PROXY_URI, Option.PROXY_SCHEME)]
    options = [o for o in options if o[0] not in (Option.URI_PATH, Option.URI_QUERY, Option.URI_HOST, Option.URI_PORT)]
    options += path_options(unquote(target.path))
    options += [(Option.URI_QUERY, unquote(q).encode()) for q in target.query]
    if not _is_ip_literal(target.host):
        options.append((Option.URI_HOST, target.host.encode()))
    if target.port != COAP_PORT:
        options.append((Option.URI_PORT, encode_uint(target.port)))
    return CoapMessage(code=req.code, options=tuple(options), payload=req.payload)


class CacheEvent(enum.Enum):
    HIT = "hit"
    STALE_HIT = "stale-hit"
    REVALIDATION_OK = "revalidation-ok"
    REVALIDATION_FULL = "revalidation-full"
    MISS = "miss"


@dataclass
class Forward:
    """A request the proxy must send upstream before it can answer."""

    request: CoapMessage
    target: ProxyTarget | None
    key: bytes | None
    stale_etag: bytes | None = None
    waiters: list = field(default_factory=list)


class CachingProxy:
    """Cache logic of a forward proxy, independent of any transport.

    ``begin`` either answers a request from the cache or returns a
    :class:`Forward`; ``complete`` applies the upstream answer to the cache
    once, and ``answer`` builds the reply for each waiting client.
    """

    def __init__(self, cache: CoapCache | None = None, on_event: Callable[[CacheEvent, bytes | None], None] | None = None):
        self.cache = cache
        self.on_event = on_event

    def _event(self, kind: CacheEvent, key: bytes | None) -> None:
        if self.on_event is not None:
            self.on_event(kind, key)

    def begin(self, req: CoapMessage, now: float) -> CoapMessage | Forward:
        target = None
        raw = req.get(Option.PROXY_URI)
        if raw is not None:
            try:
                target = parse_proxy_uri(raw.decode("utf-8"))
            except (ProxyError, UnicodeDecodeError):
                return CoapMessage(code=Code.BAD_OPTION)
            fwd = upstream_request(req, target)
        else:
            fwd = CoapMessage(code=req.code, options=req.options, payload=req.payload)
        key = cache_key(req) if self.cache is not None else None
        if key is None:
            return Forward(fwd, target, None)
        state, entry = self.cache.lookup(key, now)
        if state is Freshness.FRESH:
            self._event(CacheEvent.HIT, key)
            return self._from_entry(req, entry, now)
        if state is Freshness.STALE:
            self._event(CacheEvent.STALE_HIT, key)
            if entry.etag is not None and entry.etag not in fwd.get_all(Option.ETAG):
                fwd = fwd.with_option(Option.ETAG, entry.etag)
            return Forward(fwd, target, key, entry.etag)
        self._event(CacheEvent.MISS, key)
        return Forward(fwd, target, key)

    @staticmethod
    def _from_entry(req: CoapMessage, entry: CacheEntry, now: float) -> CoapMessage:
        if entry.etag is not None and entry.etag in req.get_all(Option.ETAG):
            return CoapMessage(
                code=Code.VALID,
                options=((Option.ETAG, entry.etag), (Option.MAX_AGE, encode_uint(entry.residual(now)))),
            )
        return entry.response(now)

    def complete(self, fwd: Forward, upstream: CoapMessage | None, now: float) -> None:
        if upstream is None or fwd.key is None or self.cache is None:
            return
        if upstream.code == Code.VALID and fwd.stale_etag is not None:
            if self.cache.refresh(fwd.key, upstream, now) is not None:
                self._event(CacheEvent.REVALIDATION_OK, fwd.key)
        elif upstream.code == Code.CONTENT:
            if fwd.stale_etag is not None:
                self._event(CacheEvent.REVALIDATION_FULL, fwd.key)
            self.cache.store(fwd.key, upstream, now)

    def answer(self, req: CoapMessage, fwd: Forward, upstream: CoapMessage | None, now: float) -> CoapMessage:
        if upstream is None:
            return CoapMessage(code=Code.GATEWAY_TIMEOUT)
        if fwd.key is not None and self.cache is not None:
            entry = self.cache.get(fwd.key)
            if upstream.code == Code.VALID and entry is not None and entry.etag == upstream.get(Option.ETAG):
                return self._from_entry(req, entry, now)
        return CoapMessage(code=upstream.code, options=upstream.options, payload=upstream.payload)

    def handle(self, req: CoapMessage, upstream: Callable[[CoapMessage], CoapMessage | None], now: float) -> CoapMessage:
        """Synchronous proxying; ``upstream`` returns None on timeout."""
        step = self.begin(req, now)
        if isinstance(step, CoapMessage):
            return step
        resp = upstream(step.request)
        self.complete(step, resp, now)
        return self.answer(req, step, resp, now)


class ProxyService:
    """Runs a :class:`CachingProxy` on a CoAP endpoint with request coalescing.

    ``peer_for(target)`` maps a Proxy-Uri target to a transport address;
    requests without Proxy-Uri go to ``default_upstream``.
    """

    def __init__(
        self,
        endpoint,
        proxy: CachingProxy,
        peer_for: Callable[[ProxyTarget], Any],
        *,
        default_upstream: Any = None,
        on_forward: Callable[[CoapMessage], None] | None = None,
    ):
        self.endpoint = endpoint
        self.proxy = proxy
        self.peer_for = peer_for
        self.default_upstream = default_upstream
        self.on_forward = on_forward
        self._inflight: dict[bytes, Forward] = {}
        endpoint.handler = self.handle

    def handle(self, req: CoapMessage, peer: Any, respond: Callable[[CoapMessage], None]) -> None:
        now = self.endpoint.clock.now()
        step = self.proxy.begin(req, now)
        if isinstance(step, CoapMessage):
            respond(step)
            return
        if step.key is not None and step.key in self._inflight:
            self._inflight[step.key].waiters.append((req, respond))
            return
        if step.target is not None:
            dest = self.peer_for(step.target)
        else:
            dest = self.default_upstream
        if dest is None:
            respond(CoapMessage(code=Code.BAD_GATEWAY))
            return
        step.waiters.append((req, respond))
        if step.key is not None:
            self._inflight[step.key] = step

        def done(resp: CoapMessage | None, err: str | None) -> None:
            if step.key is not None:
                self._inflight.pop(step.key, None)
            t = self.endpoint.clock.now()
            self.proxy.complete(step, resp, t)
            for waiting_req, waiting_respond in step.waiters:
                waiting_respond(self.proxy.answer(waiting_req, step, resp, t))

        if self.on_forward is not None:
            self.on_forward(step.request)
        self.endpoint.request(replace(step.request, token=b""), dest, done)
