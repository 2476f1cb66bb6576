"""Deterministic simulated infrastructure with failure injection.

Builds a host/vm/service tree, derives each component's analytic up/down
timeline (failures propagate down hosts edges), and registers probe drivers
that answer from that timeline at the simulated query time. The ground truth
doubles as the oracle for availability and root-cause checks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .clock import Clock
from .collector import DriverRegistry, DriverResult, Outcome, ProbeSpec
from .errors import InvalidScenario, UnknownComponent
from .events import ComponentId, ComponentKind
from .topology import EdgeKind, InventoryNode, Topology


@dataclass(frozen=True)
class Failure:
    component: str
    down_at_ms: int
    up_at_ms: int


@dataclass(frozen=True)
class SimScenario:
    seed: int
    hosts: int
    vms_per_host: int
    services_per_vm: int
    horizon_ms: int
    failures: tuple[Failure, ...] = ()
    name: str = ""
    probe_period_ms: int = 1000
    probe_deadline_ms: int = 500
    ping_latency_ms: float = 0.0
    metrics_latency_ms: float = 0.0
    workers: int | None = None
    expect_missed: bool | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "failures", tuple(self.failures))
        if self.hosts < 1 or self.vms_per_host < 0 or self.services_per_vm < 0:
            raise InvalidScenario("component counts must be positive")
        if self.horizon_ms <= 0:
            raise InvalidScenario("horizon_ms must be > 0")
        if not (0 < self.probe_deadline_ms <= self.probe_period_ms):
            raise InvalidScenario("need 0 < probe_deadline_ms <= probe_period_ms")
        for f in self.failures:
            if not (0 <= f.down_at_ms < f.up_at_ms <= self.horizon_ms):
                raise InvalidScenario(
                    f"failure of {f.component}: need 0 <= down_at < up_at <= horizon"
                )


def _merge_intervals(intervals: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[tuple[int, int]] = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    return merged


@dataclass
class GroundTruthLog:
    """Per-component analytic state: merged down intervals and transitions."""

    down_intervals: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    def components(self) -> list[str]:
        return sorted(self.down_intervals)

    def is_up(self, component_id: str, t_ms: int) -> bool:
        try:
            intervals = self.down_intervals[component_id]
        except KeyError:
            raise UnknownComponent(component_id) from None
        return not any(a <= t_ms < b for a, b in intervals)

    def transitions(self, component_id: str) -> list[tuple[int, bool]]:
        """(t, up) transitions, alternating; first entry at t=0."""
        intervals = self.down_intervals.get(component_id)
        if intervals is None:
            raise UnknownComponent(component_id)
        out: list[tuple[int, bool]] = []
        if intervals and intervals[0][0] == 0:
            out.append((0, False))
        else:
            out.append((0, True))
        for a, b in intervals:
            if a > 0:
                out.append((a, False))
            out.append((b, True))
        return out

    def transition_count(self, component_id: str, window: tuple[int, int]) -> int:
        """State changes strictly inside the window."""
        start, end = window
        n = 0
        for a, b in self.down_intervals.get(component_id, []):
            if start < a < end:
                n += 1
            if start < b < end:
                n += 1
        return n


def oracle_availability(ground_truth: GroundTruthLog, component_id: str, window: tuple[int, int]) -> float:
    """Exact availability ratio from the analytic state function."""
    start, end = int(window[0]), int(window[1])
    if end <= start:
        raise InvalidScenario("window must have positive length")
    intervals = ground_truth.down_intervals.get(component_id)
    if intervals is None:
        raise UnknownComponent(component_id)
    down = sum(max(0, min(b, end) - max(a, start)) for a, b in intervals)
    return (end - start - down) / (end - start)


def _deterministic_metric(seed: int, component_id: str, t_ms: int, name: str, lo: float, hi: float) -> float:
    digest = hashlib.sha256(f"{seed}:{component_id}:{t_ms}:{name}".encode()).digest()
    frac = int.from_bytes(digest[:8], "big") / 2**64
    return lo + frac * (hi - lo)


@dataclass
class SimInfra:
    """Built scenario: topology, ground truth and driver factories."""

    scenario: SimScenario
    topology: Topology
    ground_truth: GroundTruthLog

    def component_ids(self) -> list[str]:
        return [n.component.id for n in self.topology.nodes()]

    def register_drivers(self, registry: DriverRegistry, clock: Clock) -> None:
        """Register sim.ping and sim.metrics answering from scenario state."""
        scenario = self.scenario
        truth = self.ground_truth

        def ping(target: ComponentId, params: Mapping, credential) -> DriverResult:
            up = truth.is_up(target.id, clock.now_ms())
            return DriverResult(
                outcome=Outcome.UP if up else Outcome.DOWN,
                metrics={"up": 1.0 if up else 0.0},
                latency_ms=scenario.ping_latency_ms,
            )

        def metrics(target: ComponentId, params: Mapping, credential) -> DriverResult:
            now = clock.now_ms()
            if not truth.is_up(target.id, now):
                return DriverResult(
                    outcome=Outcome.DOWN,
                    metrics={"up": 0.0},
                    latency_ms=scenario.metrics_latency_ms,
                )
            return DriverResult(
                outcome=Outcome.UP,
                metrics={
                    "cpu_pct": _deterministic_metric(scenario.seed, target.id, now, "cpu", 5.0, 95.0),
                    "mem_pct": _deterministic_metric(scenario.seed, target.id, now, "mem", 10.0, 90.0),
                },
                latency_ms=scenario.metrics_latency_ms,
            )

        registry.register("sim.ping", ping)
        registry.register("sim.metrics", metrics)

    def probe_specs(self, ping: bool = True, metrics: bool = True) -> list[ProbeSpec]:
        specs: list[ProbeSpec] = []
        for cid in self.component_ids():
            node = self.topology.node(cid)
            if ping:
                specs.append(
                    ProbeSpec(
                        probe_id=f"ping-{cid}",
                        target=node.component,
                        driver="sim.ping",
                        period_ms=self.scenario.probe_period_ms,
                        deadline_ms=self.scenario.probe_deadline_ms,
                    )
                )
            if metrics:
                specs.append(
                    ProbeSpec(
                        probe_id=f"metrics-{cid}",
                        target=node.component,
                        driver="sim.metrics",
                        period_ms=self.scenario.probe_period_ms,
                        deadline_ms=self.scenario.probe_deadline_ms,
                    )
                )
        return specs

    def expected_roots(self, window: tuple[int, int]) -> frozenset[str]:
        """Ground-truth root set: down components with no down ancestor."""
        start, end = window
        down = {
            cid
            for cid, intervals in self.ground_truth.down_intervals.items()
            if any(a < end and b > start for a, b in intervals)
        }
        roots = set()
        for cid in down:
            ancestor_ids = {c.id for c in self.topology.ancestors(cid)}
            if not (ancestor_ids & down):
                roots.add(cid)
        return frozenset(roots)


def build(scenario: SimScenario) -> SimInfra:
    """Generate topology and ground truth; identical scenarios build identically."""
    topo = Topology()
    parents: dict[str, str | None] = {}
    for h in range(1, scenario.hosts + 1):
        host_id = f"host-{h}"
        topo.upsert_node(InventoryNode(ComponentId(host_id, ComponentKind.PHYSICAL_HOST)))
        parents[host_id] = None
        for i in range(1, scenario.vms_per_host + 1):
            vm_id = f"vm-{h}-{i}"
            topo.upsert_node(
                InventoryNode(
                    ComponentId(vm_id, ComponentKind.VM),
                    attrs={"host_id": host_id},
                )
            )
            topo.link(host_id, vm_id, EdgeKind.HOSTS)
            parents[vm_id] = host_id
            for j in range(1, scenario.services_per_vm + 1):
                svc_id = f"svc-{h}-{i}-{j}"
                topo.upsert_node(InventoryNode(ComponentId(svc_id, ComponentKind.SERVICE)))
                topo.link(vm_id, svc_id, EdgeKind.HOSTS)
                parents[svc_id] = vm_id

    for f in scenario.failures:
        if f.component not in parents:
            raise InvalidScenario(f"failure names unknown component {f.component!r}")

    own: dict[str, list[tuple[int, int]]] = {cid: [] for cid in parents}
    for f in scenario.failures:
        own[f.component].append((f.down_at_ms, f.up_at_ms))

    truth = GroundTruthLog()
    for cid in parents:
        intervals: list[tuple[int, int]] = []
        cur: str | None = cid
        while cur is not None:  # inherit every ancestor's failures
            intervals.extend(own[cur])
            cur = parents[cur]
        truth.down_intervals[cid] = _merge_intervals(intervals)

    return SimInfra(scenario=scenario, topology=topo, ground_truth=truth)
