"""Deterministic discrete-event simulation of a two-hop constrained network."""

from .link import DTLS_RECORD_OVERHEAD, PROFILES, LinkModel, fragment, fragment_count, profile
from .metrics import Metrics, link_utilization, resolution_cdf, retransmission_offsets, write_bundle
from .scenario import Scenario, ScenarioError
from .sim import Simulation, run, workload_name

__all__ = [
    "DTLS_RECORD_OVERHEAD",
    "PROFILES",
    "LinkModel",
    "Metrics",
    "Scenario",
    "ScenarioError",
    "Simulation",
    "fragment",
    "fragment_count",
    "link_utilization",
    "profile",
    "resolution_cdf",
    "retransmission_offsets",
    "run",
    "workload_name",
    "write_bundle",
]
