"""Agentless cloud monitoring framework.

Raw observations from probe drivers or external scripts are normalized into
a common event format, published on an in-memory authorized pub/sub bus,
and consumed by topology-aware analytics (thresholds, availability,
deduplication, root cause). See the cli module for the operator surface.
"""

from . import analytics, bus, clock, collector, config, events, gateway, pipeline, sim, topology
from .analytics import (
    AvailabilityWindow,
    Comparator,
    DedupOutcome,
    DedupStore,
    RcaResult,
    ThresholdRule,
    availability,
    correlate,
    deduplicate,
    eval_threshold,
    root_cause,
)
from .bus import AuthToken, EventBus, EventFilter, Role, StatusSnapshot, Subscription
from .clock import SimulatedClock, SystemClock
from .collector import (
    Collector,
    CredentialRecord,
    DeadlineReport,
    DriverRegistry,
    DriverResult,
    Outcome,
    ProbeResult,
    ProbeSpec,
    RateBudget,
    authorize_probe,
    required_workers,
)
from .events import (
    BUILTIN_RULESET,
    ComponentId,
    ComponentKind,
    NormalizedEvent,
    RawEvent,
    Severity,
    as_raw,
    decode_ndjson,
    dedup_key,
    encode_ndjson,
    make_event,
    normalize,
)
from .gateway import GatewayServer
from .pipeline import ManagementService, SimRunResult, run_scenario
from .sim import GroundTruthLog, SimInfra, SimScenario, build, oracle_availability
from .topology import EdgeKind, InventoryNode, Layer, RelationshipEdge, Topology

__version__ = "0.1.0"
