"""DoC endpoints on top of the CoAP messaging layer: server service and client resolver."""

from __future__ import annotations

import enum
import logging
import math
import random
from dataclasses import dataclass, replace
from typing import Any, Callable

from . import oscore
from .cache import CacheEvent, CachingProxy, CoapCache, format_proxy_uri
from .coap import Code, CoapMessage, Option, code_text
from .doc import DocClientConfig, DocError, DocServer, accept_response, build_request, check_max_age_consistency
from .dns import FLAG_RD, DnsMessage, DnsName, DnsQuestion, RType, as_name, encode_query, min_ttl

log = logging.getLogger(__name__)


class DocService:
    """Serves a :class:`DocServer` on a CoAP endpoint, optionally behind OSCORE.

    ``contexts`` maps a client's key id to the server-side security context.
    With an :class:`oscore.EchoState` requests arriving on an unsynchronized
    replay window are answered with an Echo challenge first.
    """

    def __init__(
        self,
        endpoint,
        server: DocServer,
        *,
        contexts: dict[bytes, oscore.SecurityContext] | None = None,
        echo: oscore.EchoState | None = None,
        on_request: Callable[[CoapMessage, Any], None] | None = None,
    ):
        self.endpoint = endpoint
        self.server = server
        self.contexts = contexts
        self.echo = echo
        self.on_request = on_request
        endpoint.handler = self.handle

    def handle(self, req: CoapMessage, peer: Any, respond: Callable[[CoapMessage], None]) -> None:
        now = self.endpoint.clock.now()
        if self.on_request is not None:
            self.on_request(req, peer)
        if self.contexts is None:
            respond(self.server.serve(req, now))
            return
        raw = req.get(Option.OSCORE)
        if raw is None:
            respond(CoapMessage(code=Code.UNAUTHORIZED))
            return
        try:
            _, kid = oscore.decode_option(raw)
            ctx = self.contexts.get(kid or b"")
            if ctx is None:
                raise oscore.AuthenticationError("unknown key id")
            inner = oscore.unprotect(req, ctx)
        except oscore.OSCOREError as exc:
            log.info("rejecting protected request from %r: %s", peer, exc)
            respond(CoapMessage(code=Code.UNAUTHORIZED))
            return
        if self.echo is not None:
            challenge = oscore.echo_handshake(self.echo, ctx, inner, now)
            if challenge is not None:
                resp = CoapMessage(code=Code.UNAUTHORIZED, token=req.token, options=((Option.ECHO, challenge),))
                respond(oscore.protect(resp, ctx))
                return
        resp = replace(self.server.serve(inner.without(Option.ECHO), now), token=req.token)
        respond(oscore.protect(resp, ctx, protect_max_age=self.server.protected_max_age))


class DnsCache:
    """The client's system DNS cache: answers age with wall time until the minimum TTL expires."""

    def __init__(self):
        self._entries: dict[tuple[DnsName, int], tuple[DnsMessage, float]] = {}

    def lookup(self, name: DnsName, rtype: int, now: float) -> DnsMessage | None:
        hit = self._entries.get((name, rtype))
        if hit is None:
            return None
        msg, stored = hit
        elapsed = math.floor(now - stored)
        if not msg.answers or min_ttl(msg) - (now - stored) <= 0:
            del self._entries[(name, rtype)]
            return None
        answers = tuple(replace(r, ttl=r.ttl - elapsed) for r in msg.answers)
        return replace(msg, answers=answers, authority=(), additional=())

    def store(self, msg: DnsMessage, now: float) -> None:
        if msg.question is None or not msg.answers:
            return
        self._entries[(msg.question.name, msg.question.rtype)] = (msg, now)


class Source(enum.Enum):
    DNS_CACHE = "dns-cache"
    COAP_CACHE = "coap-cache"
    NETWORK = "network"


@dataclass
class Resolution:
    name: DnsName
    rtype: int
    started: float
    finished: float | None = None
    message: DnsMessage | None = None
    error: str | None = None
    source: Source | None = None
    tag: Any = None

    @property
    def ok(self) -> bool:
        return self.message is not None


def to_proxy_request(req: CoapMessage, host: str, port: int, *, path_inside: bool = False) -> CoapMessage:
    """Move the request URI into a Proxy-Uri option.

    With ``path_inside`` only scheme and authority go into Proxy-Uri and the
    Uri-Path/Uri-Query options stay, so object security can encrypt them.
    """
    if path_inside:
        return req.set_option(Option.PROXY_URI, format_proxy_uri(host, "", port))
    path = req.uri_path
    query = "&".join(v.decode() for v in req.get_all(Option.URI_QUERY))
    uri = format_proxy_uri(host, path, port) + (f"?{query}" if query else "")
    return req.without(Option.URI_PATH, Option.URI_QUERY, Option.URI_HOST, Option.URI_PORT).with_option(
        Option.PROXY_URI, uri
    )


class DocClient:
    """Resolves names over DoC through a CoAP endpoint.

    Lookup order: system DNS cache, client CoAP cache, network. With a
    ``proxy`` the request carries a Proxy-Uri for the server; uncacheable
    requests (POST, OSCORE) go straight to the server unless
    ``proxy_uncacheable`` is set.
    """

    def __init__(
        self,
        endpoint,
        server_peer: Any,
        cfg: DocClientConfig = DocClientConfig(),
        *,
        server_host: str = "::1",
        server_port: int = 5683,
        proxy: Any = None,
        proxy_uncacheable: bool = False,
        coap_cache: CoapCache | None = None,
        dns_cache: DnsCache | None = None,
        security: oscore.SecurityContext | None = None,
        check_protected_max_age: bool = False,
        block_size: int | None = None,
        rng: random.Random | None = None,
        on_event: Callable[[str, CacheEvent, Any], None] | None = None,
        on_transmit: Callable[[Resolution, Any], None] | None = None,
    ):
        self.endpoint = endpoint
        self.server_peer = server_peer
        self.cfg = cfg
        self.server_host = server_host
        self.server_port = server_port
        self.proxy = proxy
        self.proxy_uncacheable = proxy_uncacheable
        self.dns_cache = dns_cache
        self.security = security
        self.check_protected_max_age = check_protected_max_age
        self.block_size = block_size
        self.rng = rng
        self.on_event = on_event
        self.on_transmit = on_transmit
        self._tag: Any = None
        self.cache_logic = (
            CachingProxy(coap_cache, on_event=lambda kind, key: self._event("client", kind, key))
            if coap_cache is not None
            else None
        )

    def _event(self, where: str, kind: CacheEvent, key: bytes | None = None) -> None:
        if self.on_event is not None:
            self.on_event(where, kind, self._tag)

    def resolve(
        self,
        name: DnsName | str,
        rtype: int = RType.AAAA,
        callback: Callable[[Resolution], None] | None = None,
        *,
        tag: Any = None,
    ) -> Resolution:
        name = as_name(name)
        now = self.endpoint.clock.now()
        res = Resolution(name, rtype, now, tag=tag)
        self._tag = tag

        def finish(msg: DnsMessage | None, error: str | None, source: Source | None) -> None:
            res.finished = self.endpoint.clock.now()
            res.message, res.error, res.source = msg, error, source
            if callback is not None:
                callback(res)

        if self.dns_cache is not None:
            cached = self.dns_cache.lookup(name, rtype, now)
            if cached is not None:
                self._event("client-dns", CacheEvent.HIT, None)
                finish(cached, None, Source.DNS_CACHE)
                return res

        query = encode_query(name, rtype, id=0)
        sent = DnsMessage(id=0, flags=FLAG_RD, question=DnsQuestion(name, rtype))
        try:
            req = build_request(query, self.cfg)
        except DocError as exc:
            finish(None, str(exc), None)
            return res

        step = None
        if self.cache_logic is not None:
            step = self.cache_logic.begin(req, now)
            if isinstance(step, CoapMessage):
                self._deliver(step, sent, finish, Source.COAP_CACHE)
                return res
            req = step.request
        self._send(req, sent, step, res, finish)
        return res

    def _send(self, req, sent, step, res, finish, echo: bytes | None = None) -> None:
        cacheable = self.cfg.method.cacheable and self.security is None
        dest = self.server_peer
        wire_req = req
        if echo is not None:
            wire_req = wire_req.with_option(Option.ECHO, echo)
        if self.proxy is not None and (cacheable or self.proxy_uncacheable):
            dest = self.proxy
            wire_req = to_proxy_request(
                wire_req, self.server_host, self.server_port, path_inside=self.security is not None
            )
        protect = None
        if self.security is not None:
            ctx = self.security
            protect = lambda m: oscore.protect(m, ctx)  # noqa: E731
        on_tx = None
        if self.on_transmit is not None:
            on_tx = lambda exchange: self.on_transmit(res, exchange)  # noqa: E731

        def done(resp: CoapMessage | None, err: str | None) -> None:
            if resp is None:
                finish(None, err or "no response", None)
                return
            if self.security is not None:
                try:
                    inner = oscore.unprotect(resp, self.security)
                except oscore.OSCOREError as exc:
                    if oscore.is_protected(resp):
                        finish(None, f"auth: {exc}", None)
                    else:
                        finish(None, f"auth: unprotected {code_text(resp.code)} response", None)
                    return
                outer_age = resp.max_age
                if inner.code == Code.UNAUTHORIZED and inner.has(Option.ECHO) and echo is None:
                    self._send(req, sent, step, res, finish, echo=inner.get(Option.ECHO))
                    return
                protected_age = inner.max_age
                if self.check_protected_max_age and outer_age is not None and protected_age is not None:
                    if not check_max_age_consistency(outer_age, protected_age):
                        finish(None, "auth: outer Max-Age exceeds protected Max-Age", None)
                        return
                resp = inner.without(Option.MAX_AGE)
                if outer_age is not None:
                    resp = resp.with_option(Option.MAX_AGE, outer_age)
            if step is not None:
                self._tag = res.tag
                t = self.endpoint.clock.now()
                self.cache_logic.complete(step, resp, t)
                resp = self.cache_logic.answer(req, step, resp, t)
            self._deliver(resp, sent, finish, Source.NETWORK)

        self.endpoint.request(wire_req, dest, done, protect=protect, block_size=self.block_size, on_transmit=on_tx)

    def _deliver(self, resp: CoapMessage, sent: DnsMessage, finish, source: Source) -> None:
        if resp.code != Code.CONTENT:
            finish(None, code_text(resp.code), None)
            return
        try:
            msg = accept_response(resp, self.cfg.scheme, sent, rng=self.rng)
        except DocError as exc:
            finish(None, str(exc), None)
            return
        if self.dns_cache is not None:
            self.dns_cache.store(msg, self.endpoint.clock.now())
        finish(msg, None, source)
