"""Scenario description, loaded from JSON and validated."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..doc import CachingScheme, DocError, DocMethod
from ..dns import parse_rtype
from .link import PROFILES, LinkModel, LinkConfigError

TRANSPORTS = ("udp", "dtls", "coap", "coaps", "oscore")
COAP_TRANSPORTS = ("coap", "coaps", "oscore")
CONTENT_FORMATS = ("wire", "cbor")


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str = "default"
    transport: str = "coap"
    method: str = "fetch"
    scheme: str = "eol-ttls"
    content_format: str = "wire"
    link_profile: str = "ieee802154"
    link: dict = field(default_factory=dict)
    client_dns_cache: bool = False
    client_coap_cache: bool = False
    proxy_cache: bool = False
    proxy_uncacheable: bool = False
    echo: bool = False
    replay_window: int = 32
    protected_max_age: bool = False
    block_size: int | None = None
    ack_timeout: float = 2.0
    random_factor: float = 1.5
    max_retransmit: int = 4
    n_queries: int = 50
    rate: float = 5.0
    names: int = 50
    rtype: str = "AAAA"
    records: int = 1
    ttl_min: int = 2
    ttl_max: int = 8
    seed: int = 1
    horizon: float = 3600.0

    def validate(self) -> "Scenario":
        problems = []
        if self.transport not in TRANSPORTS:
            problems.append(f"transport must be one of {TRANSPORTS}")
        try:
            DocMethod.parse(self.method)
        except DocError:
            problems.append("method must be fetch, get or post")
        try:
            CachingScheme.parse(self.scheme)
        except DocError:
            problems.append("scheme must be doh-like or eol-ttls")
        if self.content_format not in CONTENT_FORMATS:
            problems.append(f"content_format must be one of {CONTENT_FORMATS}")
        if self.link_profile not in PROFILES:
            problems.append(f"link_profile must be one of {sorted(PROFILES)}")
        else:
            try:
                self.link_model()
            except (TypeError, LinkConfigError) as exc:
                problems.append(f"link: {exc}")
        if self.transport not in COAP_TRANSPORTS and (self.client_coap_cache or self.proxy_cache):
            problems.append("CoAP caches need a CoAP-based transport")
        if self.echo and self.transport != "oscore":
            problems.append("echo needs the oscore transport")
        if self.block_size is not None and self.block_size not in (16, 32, 64, 128, 256, 512, 1024):
            problems.append("block_size must be a power of two between 16 and 1024")
        try:
            parse_rtype(self.rtype)
        except ValueError:
            problems.append(f"unknown rtype {self.rtype!r}")
        for name in ("n_queries", "names", "records", "replay_window"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.rate <= 0:
            problems.append("rate must be positive")
        if not 0 <= self.ttl_min <= self.ttl_max:
            problems.append("need 0 <= ttl_min <= ttl_max")
        if self.ack_timeout <= 0 or self.random_factor < 1 or self.max_retransmit < 0:
            problems.append("invalid CoAP transmission parameters")
        if problems:
            raise ScenarioError("; ".join(problems))
        return self

    def link_model(self) -> LinkModel:
        return PROFILES[self.link_profile].with_overrides(**self.link)

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        if not isinstance(data, dict):
            raise ScenarioError("scenario must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {', '.join(unknown)}")
        try:
            return cls(**data).validate()
        except TypeError as exc:
            raise ScenarioError(f"bad value type: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "Scenario":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)
