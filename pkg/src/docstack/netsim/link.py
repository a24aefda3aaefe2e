"""Link-layer frame model with 6LoWPAN-style fragmentation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

# DTLS 1.2 record: 13 header + 8 explicit nonce + 8 CCM-8 tag
DTLS_RECORD_OVERHEAD = 29


class LinkConfigError(ValueError):
    pass


def _floor8(value: int) -> int:
    return value - value % 8


@dataclass(frozen=True)
class LinkModel:
    """Frame budget of one link technology.

    ``payload`` in :func:`fragment` is the UDP payload. An unfragmented
    frame is mac_header + adaptation_header + payload. A fragmented datagram
    carries the compressed IP/UDP header in the first fragment only.

    The 802.15.4 defaults assume long MAC addresses plus FCS (23 octets) and
    IPHC without stateful context compression, i.e. both global addresses
    inline, with UDP next-header compression (41 octets).
    """

    mtu: int = 127
    mac_header: int = 23
    adaptation_header: int = 41
    frag1_header: int = 4
    fragN_header: int = 5
    loss_prob: float = 0.05
    latency: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.loss_prob <= 1.0:
            raise LinkConfigError("loss_prob must lie in [0, 1]")
        if self.latency < 0:
            raise LinkConfigError("latency must not be negative")
        if min(self.mtu, self.mac_header, self.adaptation_header, self.frag1_header, self.fragN_header) < 0:
            raise LinkConfigError("header sizes must not be negative")

    @property
    def single_capacity(self) -> int:
        return self.mtu - self.mac_header - self.adaptation_header

    @property
    def first_capacity(self) -> int:
        return _floor8(self.mtu - self.mac_header - self.frag1_header - self.adaptation_header)

    @property
    def next_capacity(self) -> int:
        return _floor8(self.mtu - self.mac_header - self.fragN_header)

    def with_overrides(self, **changes) -> "LinkModel":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


PROFILES = {
    "ieee802154": LinkModel(),
    # LoRaWAN MHDR+FHDR+FPort+MIC, SCHC-compressed IPv6/UDP
    "lorawan": LinkModel(mtu=59, mac_header=13, adaptation_header=3, frag1_header=2, fragN_header=2),
}


def profile(name: str, **overrides) -> LinkModel:
    try:
        base = PROFILES[name]
    except KeyError:
        raise LinkConfigError(f"unknown link profile {name!r}; choose from {sorted(PROFILES)}") from None
    return base.with_overrides(**overrides) if overrides else base


def fragment(payload: int, link: LinkModel) -> list[int]:
    """Frame sizes (octets on the air) needed to carry ``payload`` UDP octets."""
    if payload <= 0:
        raise LinkConfigError("payload must be positive")
    if link.single_capacity >= payload:
        return [link.mac_header + link.adaptation_header + payload]
    first, rest = link.first_capacity, link.next_capacity
    if first <= 0 or rest <= 0:
        raise LinkConfigError(f"link leaves no room for fragment payload (first {first}, next {rest})")
    frames = [link.mac_header + link.frag1_header + link.adaptation_header + first]
    remaining = payload - first
    while remaining > 0:
        chunk = min(rest, remaining)
        frames.append(link.mac_header + link.fragN_header + chunk)
        remaining -= chunk
    return frames


def fragment_count(payload: int, link: LinkModel) -> int:
    if payload <= link.single_capacity:
        return 1
    return math.ceil((payload - link.first_capacity) / link.next_capacity) + 1
