"""Object security for CoAP (OSCORE-style AEAD protection of whole messages).

Layout notes (fixed; client and server of this stack must agree):

* Key/IV derivation: HKDF-SHA256(salt=master salt, IKM=master secret,
  info=CBOR [id, id_context or null, 10, "Key" | "IV", length]).
* AEAD: AES-CCM with 16-octet key, 13-octet nonce, 8-octet tag (COSE alg 10).
* Nonce: (len(id) || id left-padded to 7 || partial IV left-padded to 5)
  XOR common IV.
* AAD: CBOR ["Encrypt0", h'', bstr(CBOR [1, [10], request kid,
  request partial IV, h''])].
* OSCORE option value: flag byte (0x08 kid present, low 3 bits partial IV
  length), partial IV, kid. Empty for responses that reuse the request nonce.
* Plaintext: inner code || inner options (delta coded) || 0xFF payload.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESCCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import cbor
from .coap import (
    Code,
    CoAPError,
    CoapMessage,
    Option,
    decode,
    encode,
    is_request,
)


@dataclass(frozen=True)
class AeadAlgorithm:
    id: int = 10
    key_length: int = 16
    nonce_length: int = 13
    tag_length: int = 8


AES_CCM_16_64_128 = AeadAlgorithm()
MAX_SEQ = (1 << 40) - 1
MAX_ID_LEN = AES_CCM_16_64_128.nonce_length - 6
ECHO_LENGTH = 8
ECHO_FRESHNESS = 60.0

# options that stay visible to proxies
OUTER_ONLY = frozenset({Option.URI_HOST, Option.URI_PORT, Option.PROXY_URI, Option.PROXY_SCHEME})


class OSCOREError(Exception):
    pass


class AuthenticationError(OSCOREError):
    pass


class ReplayError(OSCOREError):
    pass


class SequenceExhausted(OSCOREError):
    pass


class ReplayWindow:
    """Sliding replay window over received partial IVs."""

    def __init__(self, size: int = 32, synchronized: bool = True):
        if size < 1:
            raise ValueError("replay window size must be positive")
        self.size = size
        self.synchronized = synchronized
        self.top = -1
        self.seen = 0  # bit i set => (top - i) accepted

    def is_fresh(self, seq: int) -> bool:
        if seq > self.top:
            return True
        diff = self.top - seq
        if diff >= self.size:
            return False
        return not (self.seen >> diff) & 1

    def accept(self, seq: int) -> None:
        if not self.is_fresh(seq):
            raise ReplayError(f"partial IV {seq} replayed or outside window")
        if seq > self.top:
            shift = seq - self.top
            self.seen = ((self.seen << shift) | 1) & ((1 << self.size) - 1)
            self.top = seq
        else:
            self.seen |= 1 << (self.top - seq)

    def initialize(self, seq: int) -> None:
        self.top = seq
        self.seen = 1
        self.synchronized = True


@dataclass(frozen=True)
class Binding:
    """Request identifiers a response is bound to."""

    kid: bytes
    piv: bytes
    nonce: bytes
    fresh: bool = True


@dataclass
class SecurityContext:
    sender_id: bytes
    recipient_id: bytes
    sender_key: bytes
    recipient_key: bytes
    common_iv: bytes
    id_context: bytes | None = None
    sender_seq: int = 0
    replay: ReplayWindow = field(default_factory=ReplayWindow)
    bindings: dict[bytes, Binding] = field(default_factory=dict)
    algorithm: AeadAlgorithm = AES_CCM_16_64_128


def _hkdf(secret: bytes, salt: bytes, info: bytes, length: int) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(secret)


def derive_context(
    master_secret: bytes,
    salt: bytes,
    sender_id: bytes,
    recipient_id: bytes,
    *,
    id_context: bytes | None = None,
    window_size: int = 32,
    synchronized: bool = True,
) -> SecurityContext:
    if sender_id == recipient_id:
        raise OSCOREError("sender and recipient ids must differ")
    for ident in (sender_id, recipient_id):
        if len(ident) > MAX_ID_LEN:
            raise OSCOREError(f"ids are limited to {MAX_ID_LEN} octets")
    alg = AES_CCM_16_64_128

    def derive(ident: bytes, kind: str, length: int) -> bytes:
        info = cbor.dumps([ident, id_context, alg.id, kind, length])
        return _hkdf(master_secret, salt, info, length)

    return SecurityContext(
        sender_id=sender_id,
        recipient_id=recipient_id,
        sender_key=derive(sender_id, "Key", alg.key_length),
        recipient_key=derive(recipient_id, "Key", alg.key_length),
        common_iv=derive(b"", "IV", alg.nonce_length),
        id_context=id_context,
        replay=ReplayWindow(window_size, synchronized),
    )


def load_context(path: str | Path, role: str, *, synchronized: bool | None = None) -> SecurityContext:
    """Load a context from a JSON keying file.

    The file holds hex strings ``master_secret``, ``master_salt``,
    ``client_id``, ``server_id`` and optionally ``replay_window``.
    ``role`` is "client" or "server" and picks the sender id.
    """
    data = json.loads(Path(path).read_text())
    client_id = bytes.fromhex(data.get("client_id", ""))
    server_id = bytes.fromhex(data.get("server_id", ""))
    if role == "client":
        sender, recipient = client_id, server_id
    elif role == "server":
        sender, recipient = server_id, client_id
    else:
        raise ValueError(f"unknown role {role!r}")
    if synchronized is None:
        synchronized = role == "client"
    return derive_context(
        bytes.fromhex(data["master_secret"]),
        bytes.fromhex(data.get("master_salt", "")),
        sender,
        recipient,
        window_size=int(data.get("replay_window", 32)),
        synchronized=synchronized,
    )


def _piv_bytes(seq: int) -> bytes:
    return seq.to_bytes(max(1, (seq.bit_length() + 7) // 8), "big")


def make_nonce(ctx: SecurityContext, id_piv: bytes, piv: bytes) -> bytes:
    n = ctx.algorithm.nonce_length
    padded = bytes([len(id_piv)]) + id_piv.rjust(n - 6, b"\0") + piv.rjust(5, b"\0")
    return bytes(a ^ b for a, b in zip(padded, ctx.common_iv))


def _aad(ctx: SecurityContext, kid: bytes, piv: bytes) -> bytes:
    external = cbor.dumps([1, [ctx.algorithm.id], kid, piv, b""])
    return cbor.dumps(["Encrypt0", b"", external])


def encode_option(piv: bytes | None, kid: bytes | None) -> bytes:
    if not piv and kid is None:
        return b""
    flags = (len(piv) if piv else 0) | (0x08 if kid is not None else 0)
    return bytes([flags]) + (piv or b"") + (kid or b"")


def decode_option(value: bytes) -> tuple[bytes, bytes | None]:
    if not value:
        return b"", None
    flags = value[0]
    if flags & 0xE0:
        raise OSCOREError("reserved bits set in OSCORE option")
    n = flags & 0x07
    if n > 5:
        raise OSCOREError("partial IV longer than 5 octets")
    pos = 1 + n
    piv = value[1:pos]
    if flags & 0x10:
        if pos >= len(value):
            raise OSCOREError("truncated kid context")
        s = value[pos]
        pos += 1 + s
    kid = value[pos:] if flags & 0x08 else None
    return piv, kid


def _plaintext(inner: CoapMessage) -> bytes:
    # serialize code, options and payload with a throwaway header, then strip it
    wire = encode(CoapMessage(code=inner.code, options=inner.options, payload=inner.payload))
    return bytes([inner.code]) + wire[4:]


def _parse_plaintext(outer: CoapMessage, plaintext: bytes) -> CoapMessage:
    if not plaintext:
        raise OSCOREError("empty plaintext")
    header = bytes([0x40 | len(outer.token), plaintext[0]]) + outer.message_id.to_bytes(2, "big")
    try:
        inner = decode(header + outer.token + plaintext[1:])
    except CoAPError as exc:
        raise OSCOREError(f"malformed inner message: {exc}") from exc
    return replace(inner, mtype=outer.mtype)


def protect(
    msg: CoapMessage,
    ctx: SecurityContext,
    role: str | None = None,
    *,
    protect_max_age: bool = False,
    new_piv: bool = False,
) -> CoapMessage:
    """Turn ``msg`` into its protected outer message.

    Requests get a fresh partial IV and register their binding under the
    token; responses are bound to the request registered under the same
    token. Max-Age always stays outer (``protect_max_age`` additionally
    keeps a protected copy inside).
    """
    if role is None:
        role = "request" if is_request(msg.code) else "response"
    inner_opts = []
    outer_opts = []
    for number, value in msg.options:
        if number in OUTER_ONLY:
            outer_opts.append((number, value))
        elif number == Option.MAX_AGE:
            outer_opts.append((number, value))
            if protect_max_age:
                inner_opts.append((number, value))
        elif number == Option.OSCORE:
            raise OSCOREError("message is already protected")
        else:
            inner_opts.append((number, value))
    inner = CoapMessage(code=msg.code, options=tuple(inner_opts), payload=msg.payload)

    if role == "request":
        if ctx.sender_seq > MAX_SEQ:
            raise SequenceExhausted("sender sequence number exhausted; rekey required")
        piv = _piv_bytes(ctx.sender_seq)
        ctx.sender_seq += 1
        nonce = make_nonce(ctx, ctx.sender_id, piv)
        binding = Binding(ctx.sender_id, piv, nonce)
        ctx.bindings[msg.token] = binding
        option = encode_option(piv, ctx.sender_id)
        outer_code = Code.POST
    else:
        binding = ctx.bindings.pop(msg.token, None)
        if binding is None:
            raise OSCOREError("no request binding for response token")
        if new_piv or not binding.fresh:
            if ctx.sender_seq > MAX_SEQ:
                raise SequenceExhausted("sender sequence number exhausted; rekey required")
            piv = _piv_bytes(ctx.sender_seq)
            ctx.sender_seq += 1
            nonce = make_nonce(ctx, ctx.sender_id, piv)
            option = encode_option(piv, None)
        else:
            nonce = binding.nonce
            option = b""
        outer_code = Code.CHANGED

    aad = _aad(ctx, binding.kid, binding.piv)
    ciphertext = AESCCM(ctx.sender_key, tag_length=ctx.algorithm.tag_length).encrypt(
        nonce, _plaintext(inner), aad
    )
    outer_opts.append((Option.OSCORE, option))
    return replace(msg, code=outer_code, options=tuple(outer_opts), payload=ciphertext)


def is_protected(msg: CoapMessage) -> bool:
    return msg.has(Option.OSCORE)


def unprotect(msg: CoapMessage, ctx: SecurityContext) -> CoapMessage:
    """Verify and decrypt a protected message; returns the inner message.

    Outer-only options (Max-Age, Proxy-Uri, ...) are not merged into the
    result; read them from the outer message. For requests arriving on a
    synchronized replay window the partial IV is checked and recorded; on an
    unsynchronized window the binding is marked not fresh and the caller has
    to run the Echo handshake.
    """
    raw = msg.get(Option.OSCORE)
    if raw is None:
        raise OSCOREError("OSCORE option missing")
    piv, kid = decode_option(raw)
    aead = AESCCM(ctx.recipient_key, tag_length=ctx.algorithm.tag_length)

    if is_request(msg.code):
        if kid is None or not piv:
            raise OSCOREError("request without kid or partial IV")
        if kid != ctx.recipient_id:
            raise AuthenticationError("unknown key id")
        seq = int.from_bytes(piv, "big")
        if ctx.replay.synchronized and not ctx.replay.is_fresh(seq):
            raise ReplayError(f"partial IV {seq} replayed or outside window")
        nonce = make_nonce(ctx, kid, piv)
        try:
            plaintext = aead.decrypt(nonce, msg.payload, _aad(ctx, kid, piv))
        except InvalidTag as exc:
            raise AuthenticationError("authentication tag mismatch") from exc
        fresh = ctx.replay.synchronized
        if fresh:
            ctx.replay.accept(seq)
        ctx.bindings[msg.token] = Binding(kid, piv, nonce, fresh)
        return _parse_plaintext(msg, plaintext)

    binding = ctx.bindings.get(msg.token)
    if binding is None:
        raise OSCOREError("response does not match a pending protected request")
    nonce = make_nonce(ctx, ctx.recipient_id, piv) if piv else binding.nonce
    try:
        plaintext = aead.decrypt(nonce, msg.payload, _aad(ctx, binding.kid, binding.piv))
    except InvalidTag as exc:
        raise AuthenticationError("authentication tag mismatch") from exc
    ctx.bindings.pop(msg.token, None)
    return _parse_plaintext(msg, plaintext)


class EchoState:
    """Server-side Echo challenges used to synchronize a replay window."""

    def __init__(self, rng: random.Random | None = None, freshness: float = ECHO_FRESHNESS):
        self.rng = rng
        self.freshness = freshness
        self.issued: dict[bytes, float] = {}

    def new_value(self, now: float) -> bytes:
        value = self.rng.randbytes(ECHO_LENGTH) if self.rng else os.urandom(ECHO_LENGTH)
        self.issued[value] = now
        return value

    def verify(self, value: bytes | None, now: float) -> bool:
        if value is None:
            return False
        issued = self.issued.pop(value, None)
        return issued is not None and now - issued <= self.freshness


def echo_handshake(
    state: EchoState, ctx: SecurityContext, request: CoapMessage, now: float
) -> bytes | None:
    """Decide on an unprotected request: None accepts it, bytes is an Echo challenge.

    ``request`` is the inner message returned by :func:`unprotect`.
    """
    binding = ctx.bindings.get(request.token)
    if binding is None:
        raise OSCOREError("request was not unprotected with this context")
    if binding.fresh:
        return None
    if state.verify(request.get(Option.ECHO), now):
        seq = int.from_bytes(binding.piv, "big")
        if ctx.replay.synchronized and not ctx.replay.is_fresh(seq):
            raise ReplayError("partial IV replayed")
        ctx.replay.initialize(seq)
        ctx.bindings[request.token] = replace(binding, fresh=True)
        return None
    return state.new_value(now)

