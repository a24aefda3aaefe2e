"""Two-hop topology simulation: two clients, a forwarder or caching proxy, a border router with the resolver.

Addresses and hop distances (to the border router, which hosts the DoC
server with no extra latency)::

    c1 (2001:db8::c1) --+  hop 2
                        +-- fwd (2001:db8::f) -- hop 1 -- server (2001:db8::1)
    c2 (2001:db8::c2) --+

Each link direction serializes its frames: a datagram occupies the link for
``frames * latency`` seconds and is delivered only if none of its frames is
lost. Multi-frame datagrams are reassembled at every hop.
"""

from __future__ import annotations

import ipaddress
import random
from dataclasses import dataclass, replace
from typing import Any, Callable

from ..cache import CacheEvent, CachingProxy, CoapCache, ProxyService
from ..coap import Event, Exchange, Outcome, TransmissionParams
from ..dns import DNSError, DnsName, DnsQuestion, build_response, decode_message, encode_message, encode_query, parse_rtype
from ..doc import (
    CONTENT_FORMAT_CBOR,
    CONTENT_FORMAT_DNS,
    CachingScheme,
    DocClientConfig,
    DocMethod,
    DocServer,
    MockResolver,
    RCODE_NXDOMAIN,
)
from ..endpoint import CoapEndpoint
from .. import oscore
from ..service import DnsCache, DocClient, DocService, Resolution, Source
from .events import EventLoop
from .link import DTLS_RECORD_OVERHEAD, LinkModel, fragment
from .metrics import CacheRecord, LinkStats, Metrics, QuerySample, Retransmission
from .scenario import Scenario

CLIENTS = ("c1", "c2")
ADDRESSES = {
    "c1": "2001:db8::c1",
    "c2": "2001:db8::c2",
    "fwd": "2001:db8::f",
    "server": "2001:db8::1",
}
NODE_OF = {addr: node for node, addr in ADDRESSES.items()}
LINKS = {"c1-fwd": 2, "c2-fwd": 2, "fwd-br": 1}
PSK_LENGTH = 9


def workload_name(index: int) -> str:
    """24-character name carrying the query index."""
    return f"h{index:09d}.abcdefghij.de"


def _link_of(a: str, b: str) -> tuple[str, str]:
    if a in CLIENTS:
        return f"{a}-fwd", "up"
    if b in CLIENTS:
        return f"{b}-fwd", "down"
    return "fwd-br", "up" if b == "server" else "down"


def _next_hop(at: str, dst: str) -> str:
    return dst if at == "fwd" else "fwd"


class Network:
    def __init__(self, loop: EventLoop, link: LinkModel, seed: int, metrics: Metrics, overhead: int):
        self.loop = loop
        self.link = link
        self.overhead = overhead
        self.metrics = metrics
        self.receivers: dict[str, Callable[[bytes, str], None]] = {}
        self._busy: dict[tuple[str, str], float] = {}
        self._rngs: dict[tuple[str, str], random.Random] = {}
        for name, hop in LINKS.items():
            for direction in ("up", "down"):
                self._rngs[(name, direction)] = random.Random(f"{seed}-link-{name}-{direction}")
                metrics.links[(name, direction)] = LinkStats(name, hop, direction)

    def attach(self, node: str, receiver: Callable[[bytes, str], None]) -> None:
        self.receivers[node] = receiver

    def sender(self, node: str) -> Callable[[bytes, Any], None]:
        def send(data: bytes, peer: Any) -> None:
            self.send(node, NODE_OF[peer], data)

        return send

    def send(self, src: str, dst: str, data: bytes) -> None:
        self._hop(src, src, dst, data)

    def _hop(self, at: str, src: str, dst: str, data: bytes) -> None:
        nxt = _next_hop(at, dst)
        key = _link_of(at, nxt)
        stats = self.metrics.links[key]
        rng = self._rngs[key]
        frames = fragment(len(data) + self.overhead, self.link)
        lost = False
        for size in frames:
            stats.frames_sent += 1
            stats.bytes_sent += size
            if rng.random() < self.link.loss_prob:
                stats.frames_lost += 1
                stats.bytes_lost += size
                lost = True
            else:
                stats.frames_received += 1
                stats.bytes_received += size
        now = self.loop.now()
        start = max(now, self._busy.get(key, 0.0))
        end = start + len(frames) * self.link.latency
        self._busy[key] = end
        self.metrics.events.append({
            "t": round(start, 6), "type": "datagram", "link": key[0], "direction": key[1],
            "src": src, "dst": dst, "octets": len(data), "frames": len(frames),
            "frame_octets": sum(frames), "lost": lost,
        })
        if not lost:
            self.loop.call_at(end, lambda: self._arrive(nxt, src, dst, data))

    def _arrive(self, node: str, src: str, dst: str, data: bytes) -> None:
        if node == dst:
            receiver = self.receivers.get(dst)
            if receiver is not None:
                receiver(data, ADDRESSES[src])
        else:
            self._hop(node, src, dst, data)


# -- DNS over UDP / DTLS ---------------------------------------------------------------

@dataclass
class _UdpPending:
    res: Resolution
    exchange: Exchange
    question: DnsQuestion
    callback: Callable[[Resolution], None] | None
    timer: Any = None


class UdpDnsClient:
    """DNS over UDP with the CoAP retransmission schedule."""

    def __init__(self, loop, send, server: str, params: TransmissionParams, rng: random.Random,
                 dns_cache: DnsCache | None = None, on_transmit=None, on_event=None):
        self.loop = loop
        self.send = send
        self.server = server
        self.params = params
        self.rng = rng
        self.dns_cache = dns_cache
        self.on_transmit = on_transmit
        self.on_event = on_event
        self.pending: dict[int, _UdpPending] = {}

    def resolve(self, name, rtype=28, callback=None, *, tag=None) -> Resolution:
        name = DnsName.from_text(name) if isinstance(name, str) else name
        now = self.loop.now()
        res = Resolution(name, rtype, now, tag=tag)
        if self.dns_cache is not None:
            cached = self.dns_cache.lookup(name, rtype, now)
            if cached is not None:
                if self.on_event:
                    self.on_event("client-dns", CacheEvent.HIT, tag)
                res.finished, res.message, res.source = now, cached, Source.DNS_CACHE
                if callback:
                    callback(res)
                return res
        qid = self.rng.randrange(0x10000)
        while qid in self.pending:
            qid = self.rng.randrange(0x10000)
        data = encode_query(name, rtype, id=qid)
        ex = Exchange.start(b"", qid, data, self.params, self.rng, now)
        pend = _UdpPending(res, ex, DnsQuestion(name, rtype), callback)
        self.pending[qid] = pend
        self._transmit(pend)
        return res

    def _transmit(self, pend: _UdpPending) -> None:
        if self.on_transmit:
            self.on_transmit(pend.res, pend.exchange)
        self.send(pend.exchange.datagram, self.server)
        qid = pend.exchange.message_id
        pend.timer = self.loop.call_later(pend.exchange.deadline - self.loop.now(), lambda: self._on_timer(qid))

    def _on_timer(self, qid: int) -> None:
        pend = self.pending.get(qid)
        if pend is None:
            return
        outcome = pend.exchange.step(Event.TIMEOUT, self.loop.now())
        if outcome is Outcome.RETRANSMIT:
            self._transmit(pend)
        elif outcome is Outcome.FAIL:
            del self.pending[qid]
            self._finish(pend, None, pend.exchange.cause)
        elif outcome is Outcome.CONTINUE:
            pend.timer = self.loop.call_later(pend.exchange.deadline - self.loop.now(), lambda: self._on_timer(qid))

    def _finish(self, pend: _UdpPending, msg, error) -> None:
        res = pend.res
        res.finished = self.loop.now()
        res.message, res.error = msg, error
        res.source = Source.NETWORK if msg is not None else None
        if msg is not None and self.dns_cache is not None:
            self.dns_cache.store(msg, res.finished)
        if pend.callback:
            pend.callback(res)

    def datagram_received(self, data: bytes, peer: str) -> None:
        try:
            msg = decode_message(data)
        except DNSError:
            return
        pend = self.pending.get(msg.id)
        if pend is None or not msg.is_response or msg.question != pend.question:
            return
        del self.pending[msg.id]
        if pend.timer is not None:
            pend.timer.cancel()
        pend.exchange.step(Event.ACK, self.loop.now())
        self._finish(pend, msg, None)


class UdpDnsServer:
    def __init__(self, loop, send, resolver, on_request=None):
        self.loop = loop
        self.send = send
        self.resolver = resolver
        self.on_request = on_request

    def datagram_received(self, data: bytes, peer: str) -> None:
        try:
            query = decode_message(data)
        except DNSError:
            return
        if query.question is None or query.is_response:
            return
        if self.on_request:
            self.on_request()
        records = self.resolver.resolve(query.question, self.loop.now())
        resp = build_response(query.question, records or [], query.id, strict_types=False)
        if records is None:
            resp = replace(resp, flags=resp.flags | RCODE_NXDOMAIN)
        self.send(encode_message(resp), peer)


# -- scenario wiring ----------------------------------------------------------------------

def build_zone(scenario: Scenario) -> dict:
    rtype = parse_rtype(scenario.rtype)
    zone = {}
    for i in range(scenario.names):
        records = []
        for r in range(scenario.records):
            if rtype == 1:
                data = str(ipaddress.IPv4Address((10 << 24) | (i << 8) | (r + 1)))
            elif rtype == 28:
                data = str(ipaddress.IPv6Address((0x20010DB8 << 96) | (i << 16) | (r + 1)))
            else:
                data = f"hex:{i:04x}{r:04x}"
            records.append({"type": scenario.rtype, "data": data,
                            "ttl_min": scenario.ttl_min, "ttl_max": scenario.ttl_max})
        zone[workload_name(i)] = records
    return zone


def psk_for(client_index: int) -> bytes:
    return bytes([client_index + 1]) * PSK_LENGTH


class Simulation:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.scenario = s = scenario
        self.loop = EventLoop()
        self.metrics = Metrics(s.name, s.seed)
        overhead = DTLS_RECORD_OVERHEAD if s.transport in ("dtls", "coaps") else 0
        self.net = Network(self.loop, s.link_model(), s.seed, self.metrics, overhead)
        self.params = TransmissionParams(s.ack_timeout, s.random_factor, s.max_retransmit)
        self.resolver = MockResolver.from_json(build_zone(s), rng=random.Random(f"{s.seed}-resolver"))
        self.rtype = parse_rtype(s.rtype)
        self.clients: dict[str, Any] = {}
        self.samples: list[QuerySample] = []
        if s.transport in ("udp", "dtls"):
            self._build_udp()
        else:
            self._build_coap()

    # -- hooks ----------------------------------------------------------------------

    def _count_request(self, *_args) -> None:
        self.metrics.server_requests += 1

    def _cache_event(self, node: str, kind: CacheEvent, query: int | None) -> None:
        now = self.loop.now()
        self.metrics.cache_events.append(CacheRecord(now, node, kind.value, query))
        self.metrics.events.append({"t": round(now, 6), "type": "cache", "node": node,
                                    "event": kind.value, "query": query})

    def _on_transmit(self, client: str, res: Resolution, exchange: Exchange) -> None:
        now = self.loop.now()
        sample = self.samples[res.tag]
        sample.transmissions += 1
        sample.last_transmission = now - sample.issued
        if exchange.attempt > 0:
            self.metrics.retransmissions.append(Retransmission(
                res.tag, client, now, now - exchange.started, now - sample.issued, exchange.attempt
            ))
            self.metrics.events.append({"t": round(now, 6), "type": "retransmission", "client": client,
                                        "query": res.tag, "attempt": exchange.attempt})

    # -- construction -----------------------------------------------------------------

    def _build_udp(self) -> None:
        s = self.scenario
        server = UdpDnsServer(self.loop, self.net.sender("server"), self.resolver, on_request=self._count_request)
        self.net.attach("server", server.datagram_received)
        for client in CLIENTS:
            udp = UdpDnsClient(
                self.loop,
                self.net.sender(client),
                ADDRESSES["server"],
                self.params,
                random.Random(f"{s.seed}-{client}"),
                dns_cache=DnsCache() if s.client_dns_cache else None,
                on_transmit=lambda res, ex, c=client: self._on_transmit(c, res, ex),
                on_event=lambda where, kind, tag, c=client: self._cache_event(f"{c}-dns", kind, tag),
            )
            self.net.attach(client, udp.datagram_received)
            self.clients[client] = udp

    def _build_coap(self) -> None:
        s = self.scenario
        scheme = CachingScheme.parse(s.scheme)
        fmt = CONTENT_FORMAT_CBOR if s.content_format == "cbor" else CONTENT_FORMAT_DNS
        cfg = DocClientConfig(method=DocMethod.parse(s.method), content_format=fmt, scheme=scheme)

        server_ep = CoapEndpoint(self.net.sender("server"), self.loop, params=self.params,
                                 rng=random.Random(f"{s.seed}-server"), block_size=s.block_size, name="server")
        self.net.attach("server", server_ep.datagram_received)
        contexts = None
        echo = None
        client_ctx: dict[str, oscore.SecurityContext] = {}
        if s.transport == "oscore":
            contexts = {}
            for i, client in enumerate(CLIENTS):
                cid = bytes([i + 1])
                client_ctx[client] = oscore.derive_context(psk_for(i), b"", cid, b"", window_size=s.replay_window)
                contexts[cid] = oscore.derive_context(psk_for(i), b"", b"", cid, window_size=s.replay_window,
                                                      synchronized=not s.echo)
            if s.echo:
                echo = oscore.EchoState(random.Random(f"{s.seed}-echo"))
        DocService(server_ep, DocServer(self.resolver, scheme, protected_max_age=s.protected_max_age),
                   contexts=contexts, echo=echo, on_request=self._count_request)

        proxy_addr = None
        if s.proxy_cache:
            fwd_ep = CoapEndpoint(self.net.sender("fwd"), self.loop, params=self.params,
                                  rng=random.Random(f"{s.seed}-fwd"), block_size=s.block_size, name="fwd")
            self.net.attach("fwd", fwd_ep.datagram_received)
            self._proxy = ProxyService(
                fwd_ep,
                CachingProxy(CoapCache(), on_event=lambda kind, key: self._cache_event("fwd", kind, None)),
                peer_for=lambda target: target.host,
            )
            proxy_addr = ADDRESSES["fwd"]

        for client in CLIENTS:
            ep = CoapEndpoint(self.net.sender(client), self.loop, params=self.params,
                              rng=random.Random(f"{s.seed}-{client}"), block_size=s.block_size, name=client)
            self.net.attach(client, ep.datagram_received)
            self.clients[client] = DocClient(
                ep,
                ADDRESSES["server"],
                cfg,
                server_host=ADDRESSES["server"],
                proxy=proxy_addr,
                proxy_uncacheable=s.proxy_uncacheable,
                coap_cache=CoapCache() if s.client_coap_cache else None,
                dns_cache=DnsCache() if s.client_dns_cache else None,
                security=client_ctx.get(client),
                check_protected_max_age=s.protected_max_age,
                block_size=s.block_size,
                rng=random.Random(f"{s.seed}-{client}-shuffle"),
                on_event=lambda where, kind, tag, c=client: self._cache_event(
                    c if where == "client" else f"{c}-dns", kind, tag),
                on_transmit=lambda res, ex, c=client: self._on_transmit(c, res, ex),
            )

    # -- workload ---------------------------------------------------------------------

    def _schedule(self) -> None:
        s = self.scenario
        rng = random.Random(f"{s.seed}-workload")
        t = 0.0
        for i in range(s.n_queries):
            t += rng.expovariate(s.rate)
            client = CLIENTS[i % len(CLIENTS)]
            index = i if s.names >= s.n_queries else rng.randrange(s.names)
            sample = QuerySample(i, client, workload_name(index), t)
            self.samples.append(sample)
            self.loop.call_at(t, lambda smp=sample: self._issue(smp))

    def _issue(self, sample: QuerySample) -> None:
        self.metrics.events.append({"t": round(self.loop.now(), 6), "type": "query",
                                    "client": sample.client, "query": sample.query, "name": sample.name})

        def done(res: Resolution) -> None:
            sample.finished = res.finished
            sample.resolved = res.ok
            sample.source = res.source.value if res.source else None
            sample.error = res.error
            self.metrics.events.append({"t": round(res.finished, 6), "type": "resolved" if res.ok else "failed",
                                        "query": sample.query, "error": res.error})

        self.clients[sample.client].resolve(sample.name, self.rtype, done, tag=sample.query)

    def run(self) -> Metrics:
        self._schedule()
        self.loop.run(until=self.scenario.horizon)
        for sample in self.samples:
            if sample.finished is None:
                sample.error = "unfinished"
        self.metrics.queries = self.samples
        return self.metrics


def run(scenario: Scenario) -> Metrics:
    return Simulation(scenario).run()
