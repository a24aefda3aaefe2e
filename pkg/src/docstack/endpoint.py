"""CoAP messaging layer: reliability, request matching, deduplication, blocks.

The endpoint never touches sockets or real time directly. It is driven by
``datagram_received`` and by timers created through a clock object, and it
emits datagrams through a ``send(data, peer)`` callable, so the simulator and
the asyncio socket wrapper plug in the same way. All calls must come from a
single scheduling context.
"""

from __future__ import annotations

import logging
import random
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Protocol

from .coap import (
    BlockOption,
    Code,
    CoAPError,
    CoapMessage,
    Event,
    Exchange,
    MessageType,
    Option,
    Outcome,
    TransmissionParams,
    decode,
    decode_block,
    encode,
    encode_block,
    is_request,
    is_response,
    slice_body,
)

log = logging.getLogger(__name__)

EXCHANGE_LIFETIME = 247.0
DEDUP_WINDOW = 32


class TimerHandle(Protocol):
    def cancel(self) -> None: ...


class Clock(Protocol):
    def now(self) -> float: ...

    def call_later(self, delay: float, callback: Callable[[], None]) -> TimerHandle: ...


ResponseCallback = Callable[[CoapMessage | None, str | None], None]
Handler = Callable[[CoapMessage, Any, Callable[[CoapMessage], None]], None]


@dataclass
class _Outgoing:
    exchange: Exchange
    peer: Any
    timer: TimerHandle | None
    request: "_ClientRequest | None"


@dataclass
class _ClientRequest:
    message: CoapMessage
    peer: Any
    callback: ResponseCallback
    block_size: int | None
    on_transmit: Callable[[Exchange], None] | None
    blocks: list[tuple[BlockOption, bytes]] = field(default_factory=list)
    block_index: int = 0
    body: bytearray = field(default_factory=bytearray)
    block2_num: int | None = None
    block2_size: int = 0
    current_mid: int | None = None
    done: bool = False


class CoapEndpoint:
    def __init__(
        self,
        send: Callable[[bytes, Any], None],
        clock: Clock,
        *,
        params: TransmissionParams | None = None,
        rng: random.Random | None = None,
        handler: Handler | None = None,
        block_size: int | None = None,
        name: str = "coap",
    ):
        self.send_datagram = send
        self.clock = clock
        self.params = params or TransmissionParams()
        self.rng = rng or random.Random()
        self.handler = handler
        self.block_size = block_size
        self.name = name
        self._next_mid = self.rng.randrange(0x10000)
        self._next_token = self.rng.randrange(0x10000)
        self._outgoing: dict[int, _Outgoing] = {}
        self._by_token: dict[bytes, _ClientRequest] = {}
        self._dedup: OrderedDict[tuple[int, Any], tuple[float, bytes | None]] = OrderedDict()
        self._block1_rx: dict[tuple[Any, bytes], tuple[float, bytearray, int]] = {}
        self._block2_store: OrderedDict[tuple[Any, bytes], tuple[float, CoapMessage]] = OrderedDict()

    # -- identifiers ----------------------------------------------------------

    def next_message_id(self) -> int:
        mid = self._next_mid
        self._next_mid = (mid + 1) & 0xFFFF
        return mid

    def new_token(self) -> bytes:
        token = self._next_token
        self._next_token = (token + 1) & 0xFFFF
        return token.to_bytes(2, "big")

    # -- client side --------------------------------------------------------------

    def request(
        self,
        msg: CoapMessage,
        peer: Any,
        callback: ResponseCallback,
        *,
        protect: Callable[[CoapMessage], CoapMessage] | None = None,
        block_size: int | None = None,
        on_transmit: Callable[[Exchange], None] | None = None,
    ) -> bytes:
        """Send a confirmable request; ``callback(response, error)`` fires once.

        ``protect`` is applied to the complete request after its token is
        assigned. With ``block_size`` a larger payload goes out as Block1
        blocks, each one its own confirmable exchange with its own
        retransmission budget.
        """
        token = msg.token or self.new_token()
        msg = replace(msg, token=token, mtype=MessageType.CON)
        if protect is not None:
            msg = protect(msg)
        req = _ClientRequest(msg, peer, callback, block_size, on_transmit)
        if block_size and len(msg.payload) > block_size:
            req.blocks = slice_body(msg.payload, block_size)
        self._by_token[token] = req
        self._send_next(req)
        return token

    def cancel(self, token: bytes) -> None:
        req = self._by_token.pop(token, None)
        if req is not None:
            req.done = True
            self._stop_outgoing(req.current_mid)

    def _send_next(self, req: _ClientRequest) -> None:
        msg = req.message
        if req.blocks and req.block_index < len(req.blocks):
            block, chunk = req.blocks[req.block_index]
            msg = replace(msg, payload=chunk).with_option(Option.BLOCK1, encode_block(block))
        if req.block2_num is not None:
            block = BlockOption.for_size(req.block2_num, False, req.block2_size)
            msg = replace(msg, payload=b"").without(Option.BLOCK1)
            msg = msg.with_option(Option.BLOCK2, encode_block(block))
        mid = self.next_message_id()
        msg = replace(msg, message_id=mid)
        self._transmit_confirmable(msg, req.peer, req)

    def _transmit_confirmable(self, msg: CoapMessage, peer: Any, req: _ClientRequest | None) -> None:
        datagram = encode(msg)
        now = self.clock.now()
        exchange = Exchange.start(msg.token, msg.message_id, datagram, self.params, self.rng, now)
        out = _Outgoing(exchange, peer, None, req)
        self._outgoing[msg.message_id] = out
        if req is not None:
            req.current_mid = msg.message_id
            if req.on_transmit:
                req.on_transmit(exchange)
        self.send_datagram(datagram, peer)
        out.timer = self.clock.call_later(exchange.timeout, lambda: self._on_timer(msg.message_id))

    def _on_timer(self, mid: int) -> None:
        out = self._outgoing.get(mid)
        if out is None:
            return
        outcome = out.exchange.step(Event.TIMEOUT, self.clock.now())
        if outcome is Outcome.RETRANSMIT:
            if out.request is not None and out.request.on_transmit:
                out.request.on_transmit(out.exchange)
            self.send_datagram(out.exchange.datagram, out.peer)
            out.timer = self.clock.call_later(out.exchange.timeout, lambda: self._on_timer(mid))
        elif outcome is Outcome.FAIL:
            del self._outgoing[mid]
            if out.request is not None:
                self._finish(out.request, None, out.exchange.cause)
        elif outcome is Outcome.CONTINUE:
            delay = out.exchange.deadline - self.clock.now()
            out.timer = self.clock.call_later(delay, lambda: self._on_timer(mid))

    def _stop_outgoing(self, mid: int | None) -> Exchange | None:
        if mid is None:
            return None
        out = self._outgoing.pop(mid, None)
        if out is None:
            return None
        if out.timer is not None:
            out.timer.cancel()
        if not out.exchange.finished:
            out.exchange.step(Event.ACK, self.clock.now())
        return out.exchange

    def _finish(self, req: _ClientRequest, response: CoapMessage | None, error: str | None) -> None:
        if req.done:
            return
        req.done = True
        self._by_token.pop(req.message.token, None)
        req.callback(response, error)

    def _handle_response(self, msg: CoapMessage, peer: Any) -> None:
        if msg.mtype == MessageType.ACK or msg.mtype == MessageType.RST:
            out = self._outgoing.get(msg.message_id)
            if out is None:
                return
            if msg.mtype == MessageType.RST:
                self._outgoing.pop(msg.message_id)
                if out.timer is not None:
                    out.timer.cancel()
                out.exchange.step(Event.RESET, self.clock.now())
                if out.request is not None:
                    self._finish(out.request, None, "reset")
                return
            self._stop_outgoing(msg.message_id)
            if msg.code == Code.EMPTY:
                return  # separate response follows
        elif msg.mtype == MessageType.CON:
            ack = CoapMessage(MessageType.ACK, Code.EMPTY, msg.message_id)
            self.send_datagram(encode(ack), peer)
        req = self._by_token.get(msg.token)
        if req is None or req.done:
            return
        self._stop_outgoing(req.current_mid)
        self._continue_request(req, msg)

    def _continue_request(self, req: _ClientRequest, msg: CoapMessage) -> None:
        if msg.code == Code.CONTINUE and req.blocks and req.block_index < len(req.blocks) - 1:
            req.block_index += 1
            self._send_next(req)
            return
        raw_block2 = msg.get_uint(Option.BLOCK2)
        if raw_block2 is not None:
            block = decode_block(raw_block2)
            expected = 0 if req.block2_num is None else req.block2_num
            if block.num != expected:
                self._finish(req, None, "block2 out of sequence")
                return
            req.body += msg.payload
            if block.more:
                req.block_index = len(req.blocks)
                req.block2_num = block.num + 1
                req.block2_size = block.size
                self._send_next(req)
                return
            msg = replace(msg, payload=bytes(req.body)).without(Option.BLOCK2)
        self._finish(req, msg.without(Option.BLOCK1), None)

    # -- server side --------------------------------------------------------------

    def _remember(self, key: tuple[int, Any], response: bytes | None) -> None:
        now = self.clock.now()
        self._dedup[key] = (now + EXCHANGE_LIFETIME, response)
        self._dedup.move_to_end(key)
        while len(self._dedup) > DEDUP_WINDOW:
            self._dedup.popitem(last=False)

    def _handle_request(self, msg: CoapMessage, peer: Any) -> None:
        now = self.clock.now()
        key = (msg.message_id, peer)
        if msg.mtype == MessageType.CON:
            seen = self._dedup.get(key)
            if seen is not None and seen[0] > now:
                if seen[1] is not None:
                    self.send_datagram(seen[1], peer)
                return
            self._remember(key, None)

        extra: tuple[tuple[int, bytes], ...] = ()

        def respond(resp: CoapMessage) -> None:
            if extra:
                resp = replace(resp, options=resp.options + extra)
            self._send_response(msg, peer, resp)

        raw_block2 = msg.get_uint(Option.BLOCK2)
        if raw_block2 is not None:
            block = decode_block(raw_block2)
            stored = self._block2_store.get((peer, msg.token))
            if block.num > 0:
                if stored is None or stored[0] <= now:
                    respond(CoapMessage(code=Code.REQUEST_ENTITY_INCOMPLETE))
                    return
                respond(self._block2_slice(stored[1], block.num, block.size))
                return

        raw_block1 = msg.get_uint(Option.BLOCK1)
        if raw_block1 is not None:
            block = decode_block(raw_block1)
            rx_key = (peer, msg.token)
            if block.num == 0:
                body = bytearray()
            else:
                state = self._block1_rx.get(rx_key)
                if state is None or state[2] != block.num:
                    respond(CoapMessage(code=Code.REQUEST_ENTITY_INCOMPLETE))
                    return
                body = state[1]
            body += msg.payload
            if block.more:
                self._block1_rx[rx_key] = (now + EXCHANGE_LIFETIME, body, block.num + 1)
                respond(CoapMessage(code=Code.CONTINUE, options=((Option.BLOCK1, _uint(raw_block1)),)))
                return
            self._block1_rx.pop(rx_key, None)
            msg = replace(msg, payload=bytes(body)).without(Option.BLOCK1)
            extra = ((Option.BLOCK1, _uint(encode_block(BlockOption(block.num, False, block.szx)))),)

        if self.handler is None:
            respond(CoapMessage(code=Code.NOT_FOUND))
            return
        try:
            self.handler(msg.without(Option.BLOCK2), peer, respond)
        except Exception:  # handler bugs must not kill the endpoint
            log.exception("%s: request handler failed", self.name)
            respond(CoapMessage(code=Code.INTERNAL_SERVER_ERROR))

    def _block2_slice(self, full: CoapMessage, num: int, size: int) -> CoapMessage:
        chunks = slice_body(full.payload, size)
        if num >= len(chunks):
            return CoapMessage(code=Code.BAD_OPTION)
        block, chunk = chunks[num]
        return replace(full, payload=chunk).with_option(Option.BLOCK2, encode_block(block))

    def _send_response(self, request: CoapMessage, peer: Any, resp: CoapMessage) -> None:
        if self.block_size and len(resp.payload) > self.block_size:
            now = self.clock.now()
            self._block2_store[(peer, request.token)] = (now + EXCHANGE_LIFETIME, resp)
            while len(self._block2_store) > DEDUP_WINDOW:
                self._block2_store.popitem(last=False)
            resp = self._block2_slice(resp, 0, self.block_size)
        mtype = MessageType.ACK if request.mtype == MessageType.CON else MessageType.NON
        mid = request.message_id if mtype == MessageType.ACK else self.next_message_id()
        resp = replace(resp, mtype=mtype, message_id=mid, token=request.token)
        datagram = encode(resp)
        if request.mtype == MessageType.CON:
            self._remember((request.message_id, peer), datagram)
        self.send_datagram(datagram, peer)

    # -- input --------------------------------------------------------------------

    def datagram_received(self, data: bytes, peer: Any) -> None:
        try:
            msg = decode(data)
        except (CoAPError, ValueError) as exc:
            log.debug("%s: dropping malformed datagram from %r: %s", self.name, peer, exc)
            return
        if is_request(msg.code):
            self._handle_request(msg, peer)
        elif is_response(msg.code) or msg.code == Code.EMPTY:
            if msg.code == Code.EMPTY and msg.mtype == MessageType.CON:
                rst = CoapMessage(MessageType.RST, Code.EMPTY, msg.message_id)
                self.send_datagram(encode(rst), peer)
                return
            self._handle_response(msg, peer)


def _uint(value: int) -> bytes:
    return value.to_bytes((value.bit_length() + 7) // 8, "big")
