"""Command-line entry point: serve | proxy | query | sizes | simulate | analyze-trace."""

from __future__ import annotations

import argparse
import asyncio
import ipaddress
import logging
import os
import random
import signal
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import oscore
from .cache import CachingProxy, CoapCache, ProxyService
from .coap import Code, TransmissionParams, code_text
from .dns import parse_rtype, rtype_name
from .doc import CONTENT_FORMAT_CBOR, CONTENT_FORMAT_DNS, CachingScheme, DocClientConfig, DocMethod, DocServer, MockResolver
from .live import open_endpoint, parse_hostport
from .netsim import Scenario, ScenarioError, profile, run, write_bundle
from .netsim.metrics import aggregate_csv
from .service import DocClient, DocService
from .sizes import METHODS, TRANSPORTS, rows_csv, size_rows
from .trace import analyze_trace

KEY_FILE_ENV = "DOCSTACK_KEY_FILE"

RCODE_NAMES = {1: "FORMERR", 2: "SERVFAIL", 3: "NXDOMAIN", 4: "NOTIMP", 5: "REFUSED"}

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_TIMEOUT = 3
EXIT_ERROR_RESPONSE = 4
EXIT_AUTH = 5

log = logging.getLogger("docstack")


def _key_file(args) -> str:
    path = args.key_file or os.environ.get(KEY_FILE_ENV)
    if not path:
        raise SystemExit(f"error: OSCORE needs --key-file or ${KEY_FILE_ENV}")
    return path


def _seq_path(key_file: str) -> Path:
    return Path(key_file + ".seq")


def _load_client_context(key_file: str) -> oscore.SecurityContext:
    """Client context resuming the sender sequence number saved by the previous run."""
    ctx = oscore.load_context(key_file, "client")
    seq = _seq_path(key_file)
    if seq.exists():
        ctx.sender_seq = int(seq.read_text().strip() or 0)
    return ctx


def _save_client_sequence(key_file: str, ctx: oscore.SecurityContext) -> None:
    _seq_path(key_file).write_text(f"{ctx.sender_seq}\n")


def _method_text(code: int) -> str:
    try:
        return Code(code).name
    except ValueError:
        return code_text(code)


def _bind_for(host: str) -> tuple[str, int]:
    return ("::", 0) if ":" in host else ("0.0.0.0", 0)


async def _wait_for_signal() -> None:
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    await stop.wait()


# -- serve -------------------------------------------------------------------------

async def _serve(args) -> int:
    resolver = MockResolver.from_file(args.zone, rng=random.Random(), aging=not args.static_ttls)
    bind = parse_hostport(args.bind)
    transport, ep = await open_endpoint(bind, block_size=args.block_size, name="server")
    contexts = echo = None
    if args.security == "oscore":
        ctx = oscore.load_context(_key_file(args), "server", synchronized=not args.echo)
        contexts = {ctx.recipient_id: ctx}
        if args.echo:
            echo = oscore.EchoState()

    def on_request(req, peer) -> None:
        print(f"request from {peer[0]}:{peer[1]} {_method_text(req.code)} {req.uri_path}", file=sys.stderr, flush=True)

    server = DocServer(resolver, CachingScheme.parse(args.scheme), protected_max_age=args.protected_max_age)
    DocService(ep, server, contexts=contexts, echo=echo, on_request=on_request)
    print(f"serving DoC on {bind[0]}:{transport.get_extra_info('sockname')[1]}", file=sys.stderr, flush=True)
    try:
        await _wait_for_signal()
    finally:
        transport.close()
    return EXIT_OK


# -- proxy -------------------------------------------------------------------------

async def _proxy(args) -> int:
    bind = parse_hostport(args.bind)
    transport, ep = await open_endpoint(bind, block_size=args.block_size, name="proxy")
    cache = CoapCache(args.capacity, args.grace)

    def on_event(kind, key) -> None:
        print(f"cache {kind.value} {key.hex()[:16] if key else '-'}", file=sys.stderr, flush=True)

    ProxyService(
        ep,
        CachingProxy(cache, on_event=on_event),
        peer_for=lambda target: (target.host, target.port),
        default_upstream=parse_hostport(args.upstream) if args.upstream else None,
    )
    print(f"proxying on {bind[0]}:{transport.get_extra_info('sockname')[1]}", file=sys.stderr, flush=True)
    try:
        await _wait_for_signal()
    finally:
        transport.close()
    return EXIT_OK


# -- query -------------------------------------------------------------------------

def _format_rdata(rtype: int, rdata: bytes) -> str:
    if rtype == 1 and len(rdata) == 4:
        return str(ipaddress.IPv4Address(rdata))
    if rtype == 28 and len(rdata) == 16:
        return str(ipaddress.IPv6Address(rdata))
    return rdata.hex()


def _exit_code(error: str) -> int:
    if error == "timeout":
        return EXIT_TIMEOUT
    if error.startswith("auth") or error == "4.01":
        return EXIT_AUTH
    if error[:2] in ("4.", "5."):
        return EXIT_ERROR_RESPONSE
    return EXIT_FAILURE


async def _query(args) -> int:
    server = parse_hostport(args.server)
    fmt = CONTENT_FORMAT_CBOR if args.content_format == "cbor" else CONTENT_FORMAT_DNS
    cfg = DocClientConfig(method=DocMethod.parse(args.method), content_format=fmt, scheme=CachingScheme.parse(args.scheme))
    params = TransmissionParams(args.ack_timeout, 1.5, args.max_retransmit)
    transport, ep = await open_endpoint(_bind_for(server[0]), params=params, name="client")
    security = key_file = None
    if args.security == "oscore":
        key_file = _key_file(args)
        security = _load_client_context(key_file)
    client = DocClient(
        ep,
        server,
        cfg,
        server_host=server[0],
        server_port=server[1],
        proxy=parse_hostport(args.proxy) if args.proxy else None,
        proxy_uncacheable=args.proxy_all,
        security=security,
        check_protected_max_age=args.protected_max_age,
        block_size=args.block_size,
        rng=random.Random(),
    )
    loop = asyncio.get_running_loop()
    done = loop.create_future()
    rtype = parse_rtype(args.type)
    client.resolve(args.name, rtype, lambda res: done.done() or done.set_result(res))
    try:
        res = await done
    finally:
        transport.close()
        if security is not None:
            _save_client_sequence(key_file, security)
    if not res.ok:
        print(f"error: resolution of {args.name} failed: {res.error}", file=sys.stderr)
        return _exit_code(res.error or "")
    rcode = res.message.rcode
    if rcode:
        print(f"status: {RCODE_NAMES.get(rcode, rcode)}", file=sys.stderr)
    elif not res.message.answers:
        print("status: NOERROR, no records", file=sys.stderr)
    for record in res.message.answers:
        print(f"{record.name}.\t{record.ttl}\tIN\t{rtype_name(record.rtype)}\t{_format_rdata(record.rtype, record.rdata)}")
    return EXIT_OK


# -- sizes / simulate / analyze-trace -------------------------------------------------

def _sizes(args) -> int:
    link = profile(args.link_profile)
    rows = size_rows(
        args.name_length,
        args.type,
        [t for t in args.transports.split(",") if t],
        [m for m in args.methods.split(",") if m],
        link,
        args.content_format,
    )
    text = rows_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_seeds(text: str, base: int) -> list[int]:
    if "," in text:
        return [int(s) for s in text.split(",") if s]
    if "-" in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return list(range(base, base + int(text)))


def _run_seed(payload: tuple[dict, int]):
    data, seed = payload
    scenario = Scenario.from_dict({**data, "seed": seed})
    return run(scenario)


def _simulate(args) -> int:
    try:
        scenario = Scenario.from_file(args.scenario)
        overrides = {k: v for k, v in (
            ("method", args.method), ("scheme", args.scheme), ("content_format", args.content_format),
            ("link_profile", args.link_profile),
        ) if v is not None}
        scenario = replace(scenario, **overrides).validate()
        seeds = _parse_seeds(args.seeds, scenario.seed)
    except (ScenarioError, ValueError, OSError) as exc:
        print(f"error: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    data = scenario.to_dict()
    jobs = [(data, seed) for seed in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            runs = list(pool.map(_run_seed, jobs))
    else:
        runs = [_run_seed(job) for job in jobs]
    for metrics in runs:
        write_bundle(metrics, out / f"seed-{metrics.seed:04d}", {**data, "seed": metrics.seed})
    (out / "aggregate.csv").write_text(aggregate_csv(runs))
    sys.stdout.write(aggregate_csv(runs))
    return EXIT_OK


def _analyze(args) -> int:
    try:
        stats = analyze_trace(args.path)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    if stats.skipped:
        print(f"warning: skipped {stats.skipped} unparsable lines", file=sys.stderr)
    sys.stdout.write(stats.to_json() if args.format == "json" else stats.to_csv())
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------

def _add_security(p: argparse.ArgumentParser) -> None:
    p.add_argument("--security", choices=("none", "oscore"), default="none")
    p.add_argument("--key-file", help=f"OSCORE keying JSON (default ${KEY_FILE_ENV})")
    p.add_argument("--protected-max-age", action="store_true",
                   help="carry / check a Max-Age copy inside the OSCORE ciphertext")
    p.add_argument("--block-size", type=int, choices=(16, 32, 64, 128, 256, 512, 1024))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="docstack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run a DoC server backed by a JSON zone")
    p.add_argument("--bind", default="127.0.0.1:5683")
    p.add_argument("--zone", required=True)
    p.add_argument("--scheme", choices=("doh-like", "eol-ttls"), default="eol-ttls")
    p.add_argument("--static-ttls", action="store_true", help="do not age upstream TTLs")
    p.add_argument("--echo", action="store_true", help="require an Echo round to sync replay windows")
    _add_security(p)

    p = sub.add_parser("proxy", help="run a caching CoAP forward proxy")
    p.add_argument("--bind", default="127.0.0.1:5684")
    p.add_argument("--upstream", help="destination for requests without Proxy-Uri")
    p.add_argument("--capacity", type=int, default=64)
    p.add_argument("--grace", type=float, default=300.0)
    p.add_argument("--block-size", type=int, choices=(16, 32, 64, 128, 256, 512, 1024))

    p = sub.add_parser("query", help="resolve one name over DoC")
    p.add_argument("name")
    p.add_argument("--type", default="AAAA")
    p.add_argument("--server", default="127.0.0.1:5683")
    p.add_argument("--proxy", help="send cacheable requests through this proxy")
    p.add_argument("--proxy-all", action="store_true", help="also proxy uncacheable (POST/OSCORE) requests")
    p.add_argument("--method", choices=("fetch", "get", "post"), default="fetch")
    p.add_argument("--scheme", choices=("doh-like", "eol-ttls"), default="eol-ttls")
    p.add_argument("--content-format", choices=("wire", "cbor"), default="wire")
    p.add_argument("--ack-timeout", type=float, default=2.0)
    p.add_argument("--max-retransmit", type=int, default=4)
    _add_security(p)

    p = sub.add_parser("sizes", help="per-layer packet sizes as CSV")
    p.add_argument("--name-length", type=int, default=24)
    p.add_argument("--type", default="AAAA")
    p.add_argument("--transports", default=",".join(TRANSPORTS))
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--link-profile", choices=("ieee802154", "lorawan"), default="ieee802154")
    p.add_argument("--content-format", choices=("wire", "cbor"), default="wire")
    p.add_argument("--out")

    p = sub.add_parser("simulate", help="run a scenario for several seeds and export CSV")
    p.add_argument("scenario")
    p.add_argument("--seeds", default="1", help="count (from the scenario seed), 'a-b' or 'a,b,c'")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--method", choices=("fetch", "get", "post"))
    p.add_argument("--scheme", choices=("doh-like", "eol-ttls"))
    p.add_argument("--content-format", choices=("wire", "cbor"))
    p.add_argument("--link-profile", choices=("ieee802154", "lorawan"))

    p = sub.add_parser("analyze-trace", help="name-length and record-type statistics")
    p.add_argument("path")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "serve":
            return asyncio.run(_serve(args))
        if args.command == "proxy":
            return asyncio.run(_proxy(args))
        if args.command == "query":
            return asyncio.run(_query(args))
        if args.command == "sizes":
            return _sizes(args)
        if args.command == "simulate":
            return _simulate(args)
        return _analyze(args)
    except oscore.OSCOREError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_AUTH
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
