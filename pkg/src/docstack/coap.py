"""CoAP message codec, block-wise helpers and confirmable-message reliability."""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field, replace
from enum import IntEnum


class CoAPError(ValueError):
    pass


class MessageType(IntEnum):
    CON = 0
    NON = 1
    ACK = 2
    RST = 3


def make_code(cls: int, detail: int) -> int:
    return (cls << 5) | detail


class Code(IntEnum):
    EMPTY = 0x00
    GET = 0x01
    POST = 0x02
    PUT = 0x03
    DELETE = 0x04
    FETCH = 0x05
    CREATED = make_code(2, 1)
    CHANGED = make_code(2, 4)
    VALID = make_code(2, 3)
    CONTENT = make_code(2, 5)
    CONTINUE = make_code(2, 31)
    BAD_REQUEST = make_code(4, 0)
    UNAUTHORIZED = make_code(4, 1)
    BAD_OPTION = make_code(4, 2)
    NOT_FOUND = make_code(4, 4)
    METHOD_NOT_ALLOWED = make_code(4, 5)
    NOT_ACCEPTABLE = make_code(4, 6)
    REQUEST_ENTITY_INCOMPLETE = make_code(4, 8)
    UNSUPPORTED_CONTENT_FORMAT = make_code(4, 15)
    INTERNAL_SERVER_ERROR = make_code(5, 0)
    BAD_GATEWAY = make_code(5, 2)
    GATEWAY_TIMEOUT = make_code(5, 4)


def code_text(code: int) -> str:
    return f"{code >> 5}.{code & 0x1F:02d}"


def is_request(code: int) -> bool:
    return 0 < code < 32


def is_response(code: int) -> bool:
    return code >= 64


class Option(IntEnum):
    IF_MATCH = 1
    URI_HOST = 3
    ETAG = 4
    URI_PORT = 7
    OSCORE = 9
    URI_PATH = 11
    CONTENT_FORMAT = 12
    MAX_AGE = 14
    URI_QUERY = 15
    ACCEPT = 17
    BLOCK2 = 23
    BLOCK1 = 27
    PROXY_URI = 35
    PROXY_SCHEME = 39
    ECHO = 252


DEFAULT_MAX_AGE = 60
MAX_TOKEN_LEN = 8
PAYLOAD_MARKER = 0xFF


def encode_uint(value: int) -> bytes:
    if value < 0:
        raise CoAPError("negative uint option value")
    return value.to_bytes((value.bit_length() + 7) // 8, "big")


def decode_uint(raw: bytes) -> int:
    return int.from_bytes(raw, "big")


@dataclass(frozen=True)
class CoapMessage:
    mtype: MessageType = MessageType.CON
    code: int = Code.EMPTY
    message_id: int = 0
    token: bytes = b""
    options: tuple[tuple[int, bytes], ...] = ()
    payload: bytes = b""

    def __post_init__(self):
        # stable sort keeps the order of repeated options
        opts = tuple(sorted(((int(n), bytes(v)) for n, v in self.options), key=lambda o: o[0]))
        object.__setattr__(self, "options", opts)
        if len(self.token) > MAX_TOKEN_LEN:
            raise CoAPError(f"token longer than {MAX_TOKEN_LEN} octets")
        if not 0 <= self.message_id <= 0xFFFF:
            raise CoAPError("message id outside 16-bit range")

    def get_all(self, number: int) -> list[bytes]:
        return [value for num, value in self.options if num == number]

    def get(self, number: int) -> bytes | None:
        for num, value in self.options:
            if num == number:
                return value
        return None

    def get_uint(self, number: int) -> int | None:
        raw = self.get(number)
        return None if raw is None else decode_uint(raw)

    def has(self, number: int) -> bool:
        return any(num == number for num, _ in self.options)

    def without(self, *numbers: int) -> "CoapMessage":
        return replace(self, options=tuple(o for o in self.options if o[0] not in numbers))

    def with_option(self, number: int, value: bytes | str | int) -> "CoapMessage":
        return replace(self, options=self.options + ((number, option_value(value)),))

    def set_option(self, number: int, value: bytes | str | int) -> "CoapMessage":
        return self.without(number).with_option(number, value)

    @property
    def uri_path(self) -> str:
        return "/" + "/".join(v.decode("utf-8") for v in self.get_all(Option.URI_PATH))

    @property
    def max_age(self) -> int | None:
        return self.get_uint(Option.MAX_AGE)


def option_value(value: bytes | str | int) -> bytes:
    if isinstance(value, int):
        return encode_uint(value)
    if isinstance(value, str):
        return value.encode("utf-8")
    return bytes(value)


def path_options(path: str) -> tuple[tuple[int, bytes], ...]:
    return tuple((Option.URI_PATH, seg.encode("utf-8")) for seg in path.split("/") if seg)


# -- codec --------------------------------------------------------------------

def _nibble(value: int) -> tuple[int, bytes]:
    if value < 13:
        return value, b""
    if value < 269:
        return 13, bytes([value - 13])
    if value < 65805:
        return 14, (value - 269).to_bytes(2, "big")
    raise CoAPError(f"option delta/length {value} too large")


def encode(msg: CoapMessage) -> bytes:
    out = bytearray()
    out.append((1 << 6) | (int(msg.mtype) << 4) | len(msg.token))
    out.append(int(msg.code))
    out += msg.message_id.to_bytes(2, "big")
    out += msg.token
    previous = 0
    for number, value in msg.options:
        delta_nib, delta_ext = _nibble(number - previous)
        len_nib, len_ext = _nibble(len(value))
        out.append((delta_nib << 4) | len_nib)
        out += delta_ext + len_ext + value
        previous = number
    if msg.payload:
        out.append(PAYLOAD_MARKER)
        out += msg.payload
    return bytes(out)


def _extended(nibble: int, data: bytes, pos: int) -> tuple[int, int]:
    if nibble < 13:
        return nibble, pos
    if nibble == 13:
        if pos >= len(data):
            raise CoAPError("truncated option extension")
        return data[pos] + 13, pos + 1
    if nibble == 14:
        if pos + 2 > len(data):
            raise CoAPError("truncated option extension")
        return int.from_bytes(data[pos : pos + 2], "big") + 269, pos + 2
    raise CoAPError("reserved option nibble 15")


def decode(data: bytes) -> CoapMessage:
    if len(data) < 4:
        raise CoAPError("datagram shorter than CoAP header")
    version = data[0] >> 6
    if version != 1:
        raise CoAPError(f"unsupported CoAP version {version}")
    mtype = MessageType((data[0] >> 4) & 0x3)
    tkl = data[0] & 0x0F
    if tkl > MAX_TOKEN_LEN:
        raise CoAPError(f"token length {tkl} is reserved")
    code = data[1]
    mid = int.from_bytes(data[2:4], "big")
    if 4 + tkl > len(data):
        raise CoAPError("truncated token")
    token = bytes(data[4 : 4 + tkl])
    pos = 4 + tkl
    options = []
    number = 0
    payload = b""
    while pos < len(data):
        byte = data[pos]
        if byte == PAYLOAD_MARKER:
            payload = bytes(data[pos + 1 :])
            if not payload:
                raise CoAPError("payload marker followed by empty payload")
            break
        pos += 1
        delta, pos = _extended(byte >> 4, data, pos)
        length, pos = _extended(byte & 0x0F, data, pos)
        if pos + length > len(data):
            raise CoAPError("option value runs past end of datagram")
        number += delta
        options.append((number, bytes(data[pos : pos + length])))
        pos += length
    if code == Code.EMPTY and (token or options or payload):
        raise CoAPError("empty message with token, options or payload")
    return CoapMessage(mtype, code, mid, token, tuple(options), payload)


# -- block-wise transfer -----------------------------------------------------

BLOCK_SIZES = (16, 32, 64, 128, 256, 512, 1024)


@dataclass(frozen=True)
class BlockOption:
    num: int
    more: bool
    szx: int

    def __post_init__(self):
        if not 0 <= self.szx <= 6:
            raise CoAPError(f"block szx {self.szx} is reserved")
        if self.num < 0 or self.num >= 1 << 20:
            raise CoAPError("block number outside 20-bit range")

    @property
    def size(self) -> int:
        return 1 << (self.szx + 4)

    @classmethod
    def for_size(cls, num: int, more: bool, size: int) -> "BlockOption":
        if size not in BLOCK_SIZES:
            raise CoAPError(f"invalid block size {size}")
        return cls(num, more, int(math.log2(size)) - 4)


def encode_block(block: BlockOption) -> int:
    return (block.num << 4) | (int(block.more) << 3) | block.szx


def decode_block(value: int) -> BlockOption:
    return BlockOption(value >> 4, bool(value & 0x8), value & 0x7)


def slice_body(body: bytes, size: int) -> list[tuple[BlockOption, bytes]]:
    if size not in BLOCK_SIZES:
        raise CoAPError(f"invalid block size {size}")
    if not body:
        return [(BlockOption.for_size(0, False, size), b"")]
    count = -(-len(body) // size)
    return [
        (BlockOption.for_size(i, i < count - 1, size), body[i * size : (i + 1) * size])
        for i in range(count)
    ]


# -- reliability ----------------------------------------------------------------

@dataclass(frozen=True)
class TransmissionParams:
    ack_timeout: float = 2.0
    random_factor: float = 1.5
    max_retransmit: int = 4

    def __post_init__(self):
        if self.random_factor < 1:
            raise CoAPError("random_factor must be >= 1")
        if self.max_retransmit < 0:
            raise CoAPError("max_retransmit must be >= 0")


def initial_timeout(params: TransmissionParams, rng: random.Random) -> float:
    return rng.uniform(params.ack_timeout, params.ack_timeout * params.random_factor)


def retransmission_schedule(params: TransmissionParams, rng: random.Random) -> list[float]:
    """Cumulative offsets (seconds after the first transmission) of each retransmission."""
    first = initial_timeout(params, rng)
    return [first * ((1 << k) - 1) for k in range(1, params.max_retransmit + 1)]


class Event(enum.Enum):
    ACK = "ack"
    TIMEOUT = "timeout"
    RESET = "reset"


class Outcome(enum.Enum):
    CONTINUE = "continue"
    RETRANSMIT = "retransmit"
    FAIL = "fail"
    COMPLETE = "complete"


@dataclass
class Exchange:
    """State of one confirmable message awaiting acknowledgement.

    ``attempt`` counts retransmissions already sent. The stored datagram is
    resent unchanged on every retransmission.
    """

    token: bytes
    message_id: int
    datagram: bytes
    params: TransmissionParams
    timeout: float
    deadline: float
    started: float
    attempt: int = 0
    cause: str | None = None
    finished: bool = field(default=False)

    @classmethod
    def start(cls, token, message_id, datagram, params, rng, now) -> "Exchange":
        timeout = initial_timeout(params, rng)
        return cls(token, message_id, datagram, params, timeout, now + timeout, now)

    def step(self, event: Event, now: float) -> Outcome:
        if self.finished:
            raise CoAPError("exchange already finished")
        if event is Event.ACK:
            self.finished = True
            return Outcome.COMPLETE
        if event is Event.RESET:
            self.finished = True
            self.cause = "reset"
            return Outcome.FAIL
        if now < self.deadline:
            return Outcome.CONTINUE
        if self.attempt >= self.params.max_retransmit:
            self.finished = True
            self.cause = "timeout"
            return Outcome.FAIL
        self.attempt += 1
        self.timeout *= 2
        self.deadline = now + self.timeout
        return Outcome.RETRANSMIT
