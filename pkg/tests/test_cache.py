import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from docstack.cache import (
    CacheEvent,
    CachingProxy,
    CoapCache,
    Forward,
    Freshness,
    ProxyError,
    ProxyService,
    cache_key,
    format_proxy_uri,
    parse_proxy_uri,
    upstream_request,
)
from docstack.coap import CoapMessage, Code, Option
from docstack.dns import RType, decode_message, encode_query
from docstack.doc import CachingScheme, DocClientConfig, DocMethod, DocServer, MockResolver, build_request
from docstack.service import to_proxy_request

ZONE = {"a.example": [{"type": "AAAA", "data": "2001:db8::1", "ttl_min": 2, "ttl_max": 8}]}


def _req(method=DocMethod.FETCH, name="a.example"):
    return build_request(encode_query(name, RType.AAAA), DocClientConfig(method=method))


def _content(max_age=10, payload=b"x", etag=b"e1"):
    opts = [(Option.MAX_AGE, bytes([max_age])), (Option.CONTENT_FORMAT, b"\x02\x29")]
    if etag:
        opts.append((Option.ETAG, etag))
    return CoapMessage(code=Code.CONTENT, options=tuple(opts), payload=payload)


def test_cache_key_rules():
    assert cache_key(_req(DocMethod.POST)) is None
    assert cache_key(_req()) != cache_key(_req(name="b.example"))
    assert cache_key(_req()) == cache_key(_req().with_option(Option.ETAG, b"zz"))
    assert cache_key(_req(DocMethod.GET)) != cache_key(_req(DocMethod.GET, "b.example"))


def test_freshness_and_residual_max_age():
    cache = CoapCache()
    key = cache_key(_req())
    cache.store(key, _content(10), now=0.0)
    state, entry = cache.lookup(key, 4.2)
    assert state is Freshness.FRESH
    assert entry.response(4.2).max_age == 5
    assert cache.lookup(key, 10.0)[0] is Freshness.STALE
    assert cache.lookup(b"other", 0.0)[0] is Freshness.MISS


def test_only_content_is_stored():
    cache = CoapCache()
    assert cache.store(b"k", CoapMessage(code=Code.NOT_FOUND), 0.0) is None
    assert cache.store(None, _content(), 0.0) is None
    entry = cache.store(b"k", CoapMessage(code=Code.CONTENT, payload=b"x"), 0.0)
    assert entry.initial_max_age == 60


def test_refresh_requires_matching_etag():
    cache = CoapCache()
    cache.store(b"k", _content(1), 0.0)
    valid = CoapMessage(code=Code.VALID, options=((Option.ETAG, b"e2"), (Option.MAX_AGE, b"\x05")))
    assert cache.refresh(b"k", valid, 2.0) is None
    valid = CoapMessage(code=Code.VALID, options=((Option.ETAG, b"e1"), (Option.MAX_AGE, b"\x05")))
    entry = cache.refresh(b"k", valid, 2.0)
    assert entry.initial_max_age == 5 and entry.residual(3.0) == 4


def test_lru_capacity_and_grace():
    cache = CoapCache(capacity=2, grace=10)
    cache.store(b"a", _content(5), 0.0)
    cache.store(b"b", _content(5), 0.0)
    cache.lookup(b"a", 1.0)
    cache.store(b"c", _content(5), 1.0)
    assert b"b" not in cache and b"a" in cache and len(cache) == 2
    assert cache.evict(16.5) == [b"a", b"c"]
    with pytest.raises(ValueError):
        CoapCache(capacity=0)


def test_dump_is_json():
    cache = CoapCache()
    cache.store(b"k", _content(10), 0.0)
    data = json.loads(json.dumps(cache.dump(3.0)))
    assert data[0]["residual"] == 7 and data[0]["etag"] == b"e1".hex() and data[0]["code"] == "2.05"


def test_proxy_uri_parsing():
    t = parse_proxy_uri("coap://[2001:db8::1]:5684/dns?dns=AAA")
    assert (t.host, t.port, t.path, t.query) == ("2001:db8::1", 5684, "/dns", ("dns=AAA",))
    assert parse_proxy_uri("coap://example.org").port == 5683
    for bad in ("http://x/dns", "coap:///dns", "coap://x/dns#frag", "coap://[::1:99999/"):
        with pytest.raises(ProxyError):
            parse_proxy_uri(bad)
    assert format_proxy_uri("2001:db8::1", "/dns") == "coap://[2001:db8::1]/dns"
    assert format_proxy_uri("example.org", "/dns", 5684) == "coap://example.org:5684/dns"


def test_upstream_request_rewrites_uri():
    req = to_proxy_request(_req(DocMethod.GET), "example.org", 5684)
    assert not req.has(Option.URI_PATH) and req.get(Option.PROXY_URI).startswith(b"coap://example.org:5684/dns?dns=")
    out = upstream_request(req, parse_proxy_uri(req.get(Option.PROXY_URI).decode()))
    assert out.uri_path == "/dns" and out.get(Option.URI_HOST) == b"example.org"
    assert out.get_uint(Option.URI_PORT) == 5684 and not out.has(Option.PROXY_URI)
    assert out.get(Option.URI_QUERY) == _req(DocMethod.GET).get(Option.URI_QUERY)


def _setup(scheme, seed=1):
    resolver = MockResolver.from_json(ZONE, rng=random.Random(seed))
    server = DocServer(resolver, scheme)
    events = []
    proxy = CachingProxy(CoapCache(), on_event=lambda kind, key: events.append(kind))
    return server, proxy, events


@pytest.mark.parametrize("scheme, event", [
    (CachingScheme.EOL_TTLS, CacheEvent.REVALIDATION_OK),
    (CachingScheme.DOH_LIKE, CacheEvent.REVALIDATION_FULL),
])
def test_stale_entry_revalidation(scheme, event):
    server, proxy, events = _setup(scheme)
    upstream_codes = []

    def upstream_at(t):
        def call(r):
            resp = server.serve(r, t)
            upstream_codes.append(resp.code)
            return resp
        return call

    req = to_proxy_request(_req(), "::1", 5683)
    first = proxy.handle(req, upstream_at(0.0), 0.0)
    ttl = first.max_age
    proxy.handle(req, upstream_at(1.0), 1.0)
    assert events[:2] == [CacheEvent.MISS, CacheEvent.HIT]
    stale = proxy.handle(req, upstream_at(ttl + 0.5), ttl + 0.5)
    assert events[2:] == [CacheEvent.STALE_HIT, event]
    assert stale.code == Code.CONTENT and stale.payload
    expected = Code.VALID if scheme is CachingScheme.EOL_TTLS else Code.CONTENT
    assert upstream_codes[-1] == expected


def test_client_etag_answered_with_valid():
    server, proxy, _ = _setup(CachingScheme.EOL_TTLS)
    req = to_proxy_request(_req(), "::1", 5683)
    first = proxy.handle(req, lambda r: server.serve(r, 0.0), 0.0)
    again = proxy.handle(req.with_option(Option.ETAG, first.get(Option.ETAG)), lambda r: None, 0.5)
    assert again.code == Code.VALID and again.payload == b""


def test_proxy_errors():
    proxy = CachingProxy(CoapCache())
    bad = _req().with_option(Option.PROXY_URI, b"http://x/")
    assert proxy.handle(bad, lambda r: None, 0.0).code == Code.BAD_OPTION
    req = to_proxy_request(_req(), "::1", 5683)
    assert proxy.handle(req, lambda r: None, 0.0).code == Code.GATEWAY_TIMEOUT


def test_post_is_forwarded_uncached():
    server, proxy, events = _setup(CachingScheme.EOL_TTLS)
    req = to_proxy_request(_req(DocMethod.POST), "::1", 5683)
    step = proxy.begin(req, 0.0)
    assert isinstance(step, Forward) and step.key is None
    proxy.handle(req, lambda r: server.serve(r, 0.0), 0.0)
    assert events == [] and len(proxy.cache) == 0


@given(st.integers(1, 255), st.floats(0, 400))
def test_served_max_age_never_exceeds_residual(max_age, t):
    cache = CoapCache()
    cache.store(b"k", _content(max_age), 0.0)
    state, entry = cache.lookup(b"k", t)
    if state is Freshness.FRESH:
        assert entry.response(t).max_age <= max_age - t + 1e-9


def test_proxy_service_coalesces(wire):
    resolver = MockResolver.from_json(ZONE, rng=random.Random(1))
    server = DocServer(resolver)
    served = []
    wire.add("server", handler=lambda req, peer, respond: (served.append(req), respond(server.serve(req, wire.loop.now()))))
    proxy_ep = wire.add("proxy")
    ProxyService(proxy_ep, CachingProxy(CoapCache()), peer_for=lambda t: "server")
    results = []
    for name in ("c1", "c2"):
        ep = wire.add(name)
        ep.request(to_proxy_request(_req(), "::1", 5683), "proxy", lambda r, e: results.append(r))
    wire.run()
    assert len(served) == 1
    assert [r.code for r in results] == [Code.CONTENT, Code.CONTENT]
    assert results[0].payload == results[1].payload


def test_proxy_service_without_target_or_default(wire):
    ProxyService(wire.add("proxy"), CachingProxy(CoapCache()), peer_for=lambda t: "server")
    results = []
    wire.add("c1").request(_req(), "proxy", lambda r, e: results.append(r))
    wire.run()
    assert results[0].code == Code.BAD_GATEWAY


def test_proxy_service_forwards_to_default(wire):
    server = DocServer(MockResolver.from_json(ZONE, rng=random.Random(1)))
    wire.add("server", handler=lambda req, peer, respond: respond(server.serve(req, 0.0)))
    ProxyService(wire.add("proxy"), CachingProxy(CoapCache()), peer_for=lambda t: None, default_upstream="server")
    results = []
    wire.add("c1").request(_req(), "proxy", lambda r, e: results.append(r))
    wire.run()
    assert decode_message(results[0].payload).answers
