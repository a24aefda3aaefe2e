"""Runs CoAP endpoints over real UDP sockets with asyncio."""

from __future__ import annotations

import asyncio
import random
import socket
from typing import Any

from .endpoint import CoapEndpoint

DEFAULT_PORT = 5683


class LoopClock:
    def __init__(self, loop: asyncio.AbstractEventLoop):
        self.loop = loop

    def now(self) -> float:
        return self.loop.time()

    def call_later(self, delay: float, callback):
        return self.loop.call_later(max(0.0, delay), callback)


def normalize_peer(addr: Any) -> tuple[str, int]:
    return (addr[0], addr[1])


def parse_hostport(text: str, default_port: int = DEFAULT_PORT) -> tuple[str, int]:
    """Parse ``host``, ``host:port``, ``[v6]`` or ``[v6]:port``."""
    text = text.strip()
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = int(rest[1:]) if rest.startswith(":") else default_port
        return host, port
    if text.count(":") == 1:
        host, port = text.split(":")
        return host, int(port)
    return text, default_port


class _Protocol(asyncio.DatagramProtocol):
    def __init__(self, endpoint_box: list):
        self.endpoint_box = endpoint_box

    def datagram_received(self, data: bytes, addr) -> None:
        if self.endpoint_box:
            self.endpoint_box[0].datagram_received(data, normalize_peer(addr))

    def error_received(self, exc: Exception) -> None:  # ICMP errors on unconnected sockets
        pass


async def open_endpoint(
    bind: tuple[str, int], *, rng: random.Random | None = None, **kwargs
) -> tuple[asyncio.DatagramTransport, CoapEndpoint]:
    loop = asyncio.get_running_loop()
    box: list = []
    family = socket.AF_INET6 if ":" in bind[0] else socket.AF_INET
    transport, _ = await loop.create_datagram_endpoint(lambda: _Protocol(box), local_addr=bind, family=family)

    def send(data: bytes, peer: tuple[str, int]) -> None:
        transport.sendto(data, peer)

    endpoint = CoapEndpoint(send, LoopClock(loop), rng=rng or random.Random(), **kwargs)
    box.append(endpoint)
    return transport, endpoint
