"""Simulation metrics, derived tables and CSV/JSON export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1

RESOLUTION_FIELDS = ["query", "client", "name", "issued", "finished", "resolution_time", "resolved", "source", "error"]
LINK_FIELDS = [
    "link", "hop", "direction", "frames_sent", "frames_received", "frames_lost",
    "bytes_sent", "bytes_received", "bytes_lost",
]
UTILIZATION_FIELDS = ["hop", "frames", "bytes"]
RETRANSMISSION_FIELDS = ["query", "client", "time", "exchange_offset", "query_offset", "attempt"]
CACHE_FIELDS = ["time", "node", "event", "query"]
AGGREGATE_FIELDS = [
    "seed", "queries", "resolved", "unresolved", "median_resolution_time", "max_resolution_time",
    "hop1_frames", "hop1_bytes", "hop2_frames", "hop2_bytes", "retransmissions",
    "cache_hits", "revalidations_ok", "revalidations_full", "server_requests",
]


@dataclass
class QuerySample:
    query: int
    client: str
    name: str
    issued: float
    finished: float | None = None
    resolved: bool = False
    source: str | None = None
    error: str | None = None
    transmissions: int = 0
    last_transmission: float | None = None

    @property
    def resolution_time(self) -> float | None:
        if not self.resolved or self.finished is None:
            return None
        return self.finished - self.issued


@dataclass
class Retransmission:
    query: int
    client: str
    time: float
    exchange_offset: float
    query_offset: float
    attempt: int


@dataclass
class CacheRecord:
    time: float
    node: str
    event: str
    query: int | None = None


@dataclass
class LinkStats:
    link: str
    hop: int
    direction: str
    frames_sent: int = 0
    frames_received: int = 0
    frames_lost: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    bytes_lost: int = 0


@dataclass
class Metrics:
    scenario: str
    seed: int
    queries: list[QuerySample] = field(default_factory=list)
    retransmissions: list[Retransmission] = field(default_factory=list)
    cache_events: list[CacheRecord] = field(default_factory=list)
    links: dict[tuple[str, str], LinkStats] = field(default_factory=dict)
    server_requests: int = 0
    events: list[dict] = field(default_factory=list)

    @property
    def resolution_times(self) -> list[float]:
        return [q.resolution_time for q in self.queries if q.resolved]

    @property
    def unresolved(self) -> list[QuerySample]:
        return [q for q in self.queries if not q.resolved]

    def hop_bytes(self, hop: int) -> int:
        return sum(s.bytes_sent for s in self.links.values() if s.hop == hop)

    def hop_frames(self, hop: int) -> int:
        return sum(s.frames_sent for s in self.links.values() if s.hop == hop)

    def count_cache(self, *events: str) -> int:
        return sum(1 for c in self.cache_events if c.event in events)


# -- analysis -----------------------------------------------------------------------

def link_utilization(metrics: Metrics) -> list[dict]:
    """Frames and bytes sent per hop distance to the sink, both directions summed."""
    hops: dict[int, list[int]] = {}
    for stats in metrics.links.values():
        row = hops.setdefault(stats.hop, [0, 0])
        row[0] += stats.frames_sent
        row[1] += stats.bytes_sent
    return [{"hop": h, "frames": v[0], "bytes": v[1]} for h, v in sorted(hops.items())]


def resolution_cdf(metrics: Metrics, grid: list[float]) -> list[tuple[float, float]]:
    """Fraction of all issued queries resolved within each grid time (right-continuous)."""
    total = len(metrics.queries)
    samples = sorted(metrics.resolution_times)
    out = []
    for t in grid:
        done = sum(1 for s in samples if s <= t)
        out.append((t, done / total if total else 0.0))
    return out


def retransmission_offsets(metrics: Metrics) -> list[tuple[int, float, int]]:
    return [(r.query, r.exchange_offset, r.attempt) for r in metrics.retransmissions]


# -- export -------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _csv(fields: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in fields})
    return buf.getvalue()


def resolution_csv(metrics: Metrics) -> str:
    rows = []
    for q in metrics.queries:
        row = asdict(q)
        row["resolution_time"] = q.resolution_time
        rows.append(row)
    return _csv(RESOLUTION_FIELDS, rows)


def links_csv(metrics: Metrics) -> str:
    return _csv(LINK_FIELDS, [asdict(s) for _, s in sorted(metrics.links.items())])


def utilization_csv(metrics: Metrics) -> str:
    return _csv(UTILIZATION_FIELDS, link_utilization(metrics))


def retransmissions_csv(metrics: Metrics) -> str:
    return _csv(RETRANSMISSION_FIELDS, [asdict(r) for r in metrics.retransmissions])


def cache_csv(metrics: Metrics) -> str:
    return _csv(CACHE_FIELDS, [asdict(c) for c in metrics.cache_events])


def summary_row(metrics: Metrics) -> dict:
    times = sorted(metrics.resolution_times)
    median = None
    if times:
        mid = len(times) // 2
        median = times[mid] if len(times) % 2 else (times[mid - 1] + times[mid]) / 2
    return {
        "seed": metrics.seed,
        "queries": len(metrics.queries),
        "resolved": len(times),
        "unresolved": len(metrics.queries) - len(times),
        "median_resolution_time": median,
        "max_resolution_time": times[-1] if times else None,
        "hop1_frames": metrics.hop_frames(1),
        "hop1_bytes": metrics.hop_bytes(1),
        "hop2_frames": metrics.hop_frames(2),
        "hop2_bytes": metrics.hop_bytes(2),
        "retransmissions": len(metrics.retransmissions),
        "cache_hits": metrics.count_cache("hit"),
        "revalidations_ok": metrics.count_cache("revalidation-ok"),
        "revalidations_full": metrics.count_cache("revalidation-full"),
        "server_requests": metrics.server_requests,
    }


def aggregate_csv(runs: list[Metrics]) -> str:
    return _csv(AGGREGATE_FIELDS, [summary_row(m) for m in runs])


def events_json(metrics: Metrics) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, "events": metrics.events}, indent=1, sort_keys=True) + "\n"


BUNDLE_FILES = {
    "resolution_times.csv": resolution_csv,
    "links.csv": links_csv,
    "link_utilization.csv": utilization_csv,
    "retransmissions.csv": retransmissions_csv,
    "cache_events.csv": cache_csv,
    "events.json": events_json,
}


def write_bundle(metrics: Metrics, out_dir: str | Path, scenario: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fname, render in BUNDLE_FILES.items():
        (out / fname).write_text(render(metrics))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario,
        "seed": metrics.seed,
        "files": sorted(BUNDLE_FILES),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out
