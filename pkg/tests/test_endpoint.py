from docstack.coap import CoapMessage, Code, MessageType, Option, decode, decode_block, encode

from conftest import Wire


def _echo_handler(calls):
    def handler(req, peer, respond):
        calls.append(req)
        respond(CoapMessage(code=Code.CONTENT, payload=req.payload[::-1] or b"ok"))

    return handler


def _request(client, peer, msg, **kwargs):
    results = []
    client.request(msg, peer, lambda resp, err: results.append((resp, err)), **kwargs)
    return results


def test_piggybacked_response(wire):
    calls = []
    client = wire.add("client")
    wire.add("server", handler=_echo_handler(calls))
    results = _request(client, "server", CoapMessage(code=Code.POST, payload=b"abc"))
    wire.run()
    assert len(results) == 1
    resp, err = results[0]
    assert err is None and resp.code == Code.CONTENT and resp.payload == b"cba"
    sent = [decode(d) for d in wire.between("server", "client")]
    assert [m.mtype for m in sent] == [MessageType.ACK]


def test_lost_request_is_resent_byte_identical():
    w = Wire(drop=lambda src, dst, data, i: i == 0)
    calls = []
    client = w.add("client")
    w.add("server", handler=_echo_handler(calls))
    results = _request(client, "server", CoapMessage(code=Code.FETCH, payload=b"q"))
    w.run()
    first, second = w.between("client", "server")
    assert first == second
    assert results[0][1] is None and len(calls) == 1


def test_lost_ack_is_deduplicated():
    w = Wire(drop=lambda src, dst, data, i: src == "server" and i == 1)
    calls = []
    client = w.add("client")
    w.add("server", handler=_echo_handler(calls))
    results = _request(client, "server", CoapMessage(code=Code.FETCH, payload=b"q"))
    w.run()
    assert len(calls) == 1
    replies = w.between("server", "client")
    assert len(replies) == 2 and replies[0] == replies[1]
    assert results[0][1] is None


def test_timeout_after_full_schedule():
    w = Wire(drop=lambda *a: True)
    client = w.add("client")
    w.add("server")
    results = _request(client, "server", CoapMessage(code=Code.FETCH, payload=b"q"))
    w.run()
    assert results == [(None, "timeout")]
    times = [t for t, s, _, _ in w.sent if s == "client"]
    assert len(times) == 5
    t0 = times[1] - times[0]
    assert 2 <= t0 < 3
    assert abs(w.loop.now() - 31 * t0) < 1e-9


def test_block1_request_exchanges(wire):
    calls = []
    client = wire.add("client")
    wire.add("server", handler=_echo_handler(calls))
    body = bytes(range(96))
    results = _request(client, "server", CoapMessage(code=Code.FETCH, payload=body), block_size=32)
    wire.run()
    requests = [decode(d) for d in wire.between("client", "server")]
    assert [m.get_uint(Option.BLOCK1) for m in requests] == [0x09, 25, 33]
    assert len(calls) == 1 and calls[0].payload == body
    resp, err = results[0]
    assert err is None and resp.payload == body[::-1]


def test_block2_response_reassembly():
    w = Wire()
    client = w.add("client")
    w.add("server", handler=_echo_handler([]), block_size=16)
    body = bytes(range(50))
    results = _request(client, "server", CoapMessage(code=Code.FETCH, payload=body))
    w.run()
    replies = [decode(d) for d in w.between("server", "client")]
    assert [decode_block(m.get_uint(Option.BLOCK2)).num for m in replies] == [0, 1, 2, 3]
    assert results[0][0].payload == body[::-1]
    assert not results[0][0].has(Option.BLOCK2)


def test_block1_retransmission_budget_is_per_block():
    # drop the first two transmissions of the second block only
    def drop(src, dst, data, i):
        if src != "client":
            return False
        msg = decode(data)
        raw = msg.get_uint(Option.BLOCK1)
        if raw is not None and decode_block(raw).num == 1:
            drop.count += 1
            return drop.count <= 2
        return False

    drop.count = 0
    w = Wire(drop=drop)
    client = w.add("client")
    w.add("server", handler=_echo_handler([]))
    results = _request(client, "server", CoapMessage(code=Code.FETCH, payload=bytes(64)), block_size=32)
    w.run()
    assert results[0][1] is None


def test_handler_error_becomes_500(wire):
    def broken(req, peer, respond):
        raise RuntimeError("boom")

    client = wire.add("client")
    wire.add("server", handler=broken)
    results = _request(client, "server", CoapMessage(code=Code.GET))
    wire.run()
    assert results[0][0].code == Code.INTERNAL_SERVER_ERROR


def test_no_handler_is_404(wire):
    client = wire.add("client")
    wire.add("server")
    results = _request(client, "server", CoapMessage(code=Code.GET))
    wire.run()
    assert results[0][0].code == Code.NOT_FOUND


def test_empty_con_ping_gets_reset(wire):
    wire.add("client")
    wire.add("server")
    wire.endpoints["server"].datagram_received(encode(CoapMessage(MessageType.CON, Code.EMPTY, 7)), "client")
    reply = decode(wire.between("server", "client")[0])
    assert reply.mtype == MessageType.RST and reply.message_id == 7


def test_malformed_datagram_ignored(wire):
    server = wire.add("server")
    server.datagram_received(b"\x00\x01", "client")
    assert wire.sent == []


def test_concurrent_requests_matched_by_token(wire):
    client = wire.add("client")
    wire.add("server", handler=_echo_handler([]))
    a = _request(client, "server", CoapMessage(code=Code.POST, payload=b"ab"))
    b = _request(client, "server", CoapMessage(code=Code.POST, payload=b"xyz"))
    wire.run()
    assert a[0][0].payload == b"ba" and b[0][0].payload == b"zyx"


def test_cancel_suppresses_callback(wire):
    client = wire.add("client")
    wire.add("server", handler=_echo_handler([]))
    results = []
    token = client.request(CoapMessage(code=Code.GET), "server", lambda r, e: results.append(r))
    client.cancel(token)
    wire.run()
    assert results == []
