"""Name-length and record-type statistics over query traces.

Trace format: one query per line, ``name [type [class]]`` separated by
whitespace or commas. Type defaults to A and class to IN. Blank lines and
lines starting with ``#`` are ignored; anything unparsable is skipped and
counted.

Conventions: population standard deviation, quartiles by linear
interpolation between closest ranks (``statistics.quantiles`` inclusive
method), ties in the mode resolved to the smallest length.
"""

from __future__ import annotations

import csv
import io
import json
import re
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .dns import DNSError, DnsName, parse_rtype, rtype_name

_CLASS = re.compile(r"IN|CH|HS|ANY|CLASS\d+|\d+")
STAT_FIELDS = ["count", "min", "max", "mode", "mean", "stddev", "q1", "q2", "q3"]


@dataclass
class TraceStats:
    count: int
    min: int
    max: int
    mode: int
    mean: float
    stddev: float
    q1: float
    q2: float
    q3: float
    type_ratios: dict[str, float] = field(default_factory=dict)
    skipped: int = 0

    def to_json(self) -> str:
        data = {k: getattr(self, k) for k in STAT_FIELDS}
        data["type_ratios"] = self.type_ratios
        data["skipped"] = self.skipped
        return json.dumps(data, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["statistic", "value"])
        for key in STAT_FIELDS:
            writer.writerow([key, getattr(self, key)])
        writer.writerow([])
        writer.writerow(["rtype", "ratio"])
        for rtype, ratio in self.type_ratios.items():
            writer.writerow([rtype, ratio])
        return buf.getvalue()


def parse_line(line: str) -> tuple[DnsName, str] | None:
    """(name, type mnemonic) or None for a blank/comment line."""
    text = line.strip()
    if not text or text.startswith("#"):
        return None
    parts = text.replace(",", " ").split()
    if len(parts) > 3:
        raise ValueError("too many fields")
    name = DnsName.from_text(parts[0])
    rtype = parse_rtype(parts[1]) if len(parts) > 1 else 1
    if len(parts) > 2 and not _CLASS.fullmatch(parts[2].upper()):
        raise ValueError(f"bad class {parts[2]!r}")
    return name, rtype_name(rtype)


def compute_stats(lengths: list[int], types: Iterable[str] = (), skipped: int = 0) -> TraceStats:
    if not lengths:
        raise ValueError("no parsable queries in trace")
    if len(lengths) == 1:
        q1 = q2 = q3 = float(lengths[0])
    else:
        q1, q2, q3 = statistics.quantiles(lengths, n=4, method="inclusive")
    counts = Counter(types)
    total = sum(counts.values())
    ratios = {t: c / total for t, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))}
    return TraceStats(
        count=len(lengths),
        min=min(lengths),
        max=max(lengths),
        mode=min(statistics.multimode(lengths)),
        mean=statistics.fmean(lengths),
        stddev=statistics.pstdev(lengths),
        q1=q1,
        q2=q2,
        q3=q3,
        type_ratios=ratios,
        skipped=skipped,
    )


def analyze_lines(lines: Iterable[str]) -> TraceStats:
    lengths, types, skipped = [], [], 0
    for line in lines:
        try:
            parsed = parse_line(line)
        except (ValueError, DNSError):
            skipped += 1
            continue
        if parsed is None:
            continue
        lengths.append(parsed[0].text_length)
        types.append(parsed[1])
    return compute_stats(lengths, types, skipped)


def analyze_trace(path: str | Path) -> TraceStats:
    with open(path, encoding="utf-8", errors="replace") as fh:
        return analyze_lines(fh)
