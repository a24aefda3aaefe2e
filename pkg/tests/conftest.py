from __future__ import annotations

import random
from typing import Callable

import pytest

from docstack.endpoint import CoapEndpoint
from docstack.netsim.events import EventLoop

ACCEPTANCE_RESULTS: list[str] = []


class Wire:
    """Endpoints joined by an in-memory datagram network on virtual time.

    ``drop(src, dst, data, index)`` returning True discards a datagram;
    ``index`` counts every datagram sent so far.
    """

    def __init__(self, latency: float = 0.005, drop: Callable | None = None):
        self.loop = EventLoop()
        self.latency = latency
        self.drop = drop or (lambda src, dst, data, index: False)
        self.endpoints: dict[str, CoapEndpoint] = {}
        self.sent: list[tuple[float, str, str, bytes]] = []

    def add(self, name: str, **kwargs) -> CoapEndpoint:
        kwargs.setdefault("rng", random.Random(name))
        ep = CoapEndpoint(lambda data, peer, src=name: self._send(src, peer, data), self.loop, name=name, **kwargs)
        self.endpoints[name] = ep
        return ep

    def _send(self, src: str, dst: str, data: bytes) -> None:
        index = len(self.sent)
        self.sent.append((self.loop.now(), src, dst, data))
        if self.drop(src, dst, data, index):
            return
        self.loop.call_later(self.latency, lambda: self.endpoints[dst].datagram_received(data, src))

    def between(self, src: str, dst: str) -> list[bytes]:
        return [d for _, s, t, d in self.sent if s == src and t == dst]

    def run(self, until: float | None = None) -> None:
        self.loop.run(until)


@pytest.fixture
def wire() -> Wire:
    return Wire()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
