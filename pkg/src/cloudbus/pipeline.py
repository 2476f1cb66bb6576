"""Composition of the management server and the end-to-end scenario runner.

ManagementService wires the bus, the topology and one analytics stage fed by
a single bus subscription: deduplication, event history for availability and
RCA queries, and threshold evaluation whose derived events are published back
onto the bus.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

from . import analytics
from .analytics import DedupStore, RcaResult, ThresholdEvaluator, ThresholdRule
from .bus import MATCH_ALL, EventBus, Role, Subscription
from .clock import Clock, SimulatedClock, SystemClock
from .collector import Collector, DeadlineReport, DriverRegistry, required_workers
from .errors import Timeout, UnknownComponent
from .events import (
    BUILTIN_RULESET,
    ComponentId,
    NormalizationRuleset,
    NormalizedEvent,
    RawEvent,
    normalize,
)
from .sim import SimScenario, build, oracle_availability
from .topology import Topology

log = logging.getLogger(__name__)


class ManagementService:
    """Bus, topology and analytics behind one facade.

    The analytics stage consumes from one subscription on one thread of
    control: either the embedded worker thread (live mode) or explicit
    process_pending() calls (deterministic mode). Never both.
    """

    def __init__(
        self,
        topology: Topology | None = None,
        clock: Clock | None = None,
        ruleset: NormalizationRuleset | None = None,
        rules: list[ThresholdRule] | None = None,
        capacity: int = 1_000_000,
        correlation_window_ms: int = 30_000,
    ):
        self.clock = clock if clock is not None else SystemClock()
        self.bus = EventBus()
        self.topology = topology if topology is not None else Topology()
        self.ruleset = ruleset if ruleset is not None else BUILTIN_RULESET
        self.correlation_window_ms = correlation_window_ms
        root = self.bus.root_token
        self._mediator = self.bus.mint_token(root, {Role.MEDIATOR}, "pipeline-mediator")
        self._consumer = self.bus.mint_token(root, {Role.CONSUMER}, "pipeline-analytics")
        self._sub: Subscription = self.bus.subscribe(self._consumer, MATCH_ALL, capacity=capacity)
        self.dedup = DedupStore()
        self.history: list[NormalizedEvent] = []
        self._evaluators = [ThresholdEvaluator(r) for r in (rules or [])]
        self._lock = threading.RLock()
        self._consumed_seq = 0
        self._worker: threading.Thread | None = None
        self._stop = threading.Event()

    # -- ingestion --------------------------------------------------------------

    def ingest_raw(self, raw: RawEvent) -> int:
        """Normalize a raw observation and publish it."""
        ev = normalize(raw, self.ruleset)
        return self.bus.publish(self._mediator, ev)

    def publish_event(self, ev: NormalizedEvent) -> int:
        return self.bus.publish(self._mediator, ev)

    # -- analytics consumption ----------------------------------------------------

    def _consume(self, seq: int, ev: NormalizedEvent) -> None:
        derived: list[NormalizedEvent] = []
        with self._lock:
            self.history.append(ev)
            self.dedup.deduplicate(ev)
            self._consumed_seq = seq
            if not ev.event_class.startswith("threshold."):
                for evaluator in self._evaluators:
                    derived.extend(evaluator.feed(ev))
        for extra in derived:
            self.bus.publish(self._mediator, extra)

    def process_pending(self, max_events: int | None = None) -> int:
        """Drain the analytics subscription synchronously; returns event count."""
        n = 0
        while max_events is None or n < max_events:
            try:
                seq, ev = self._sub.next_with_seq(timeout_ms=0)
            except Timeout:
                break
            self._consume(seq, ev)
            n += 1
        return n

    def start_worker(self) -> None:
        """Run the analytics stage on a background thread (live mode)."""
        if self._worker is not None:
            return
        self._stop.clear()

        def loop() -> None:
            while not self._stop.is_set():
                try:
                    seq, ev = self._sub.next_with_seq(timeout_ms=200)
                except Timeout:
                    continue
                except Exception:
                    break
                self._consume(seq, ev)

        self._worker = threading.Thread(target=loop, name="cloudbus-analytics", daemon=True)
        self._worker.start()

    def stop_worker(self) -> None:
        if self._worker is None:
            return
        self._stop.set()
        self._worker.join(timeout=2.0)
        self._worker = None

    def sync(self, timeout_ms: int = 2000) -> bool:
        """Wait until the analytics stage has consumed everything published."""
        target = self.bus.current_seq
        if self._worker is None:
            self.process_pending()
            return self._consumed_seq >= target
        deadline = time.monotonic() + timeout_ms / 1000.0
        while self._consumed_seq < target and time.monotonic() < deadline:
            time.sleep(0.01)
        return self._consumed_seq >= target

    # -- queries ---------------------------------------------------------------------

    def _component_for(self, component_id: str) -> ComponentId:
        if component_id in self.topology:
            return self.topology.node(component_id).component
        with self._lock:
            for ev in self.history:
                if ev.component.id == component_id:
                    return ev.component
        raise UnknownComponent(component_id)

    def availability(self, component_id: str, start_ms: int, end_ms: int) -> analytics.AvailabilityWindow:
        component = self._component_for(component_id)
        with self._lock:
            events = sorted(
                (
                    ev
                    for ev in self.history
                    if ev.component.id == component_id and ev.event_class == "availability"
                ),
                key=lambda e: e.occurred_at,
            )
        return analytics.availability(component, (start_ms, end_ms), events)

    def down_components(self, start_ms: int, end_ms: int) -> set[str]:
        with self._lock:
            return {
                ev.component.id
                for ev in self.history
                if ev.event_class == "availability"
                and ev.metrics.get("up") == 0.0
                and start_ms <= ev.occurred_at < end_ms
                and ev.component.id in self.topology
            }

    def rca(self, start_ms: int, end_ms: int) -> RcaResult:
        down = self.down_components(start_ms, end_ms)
        return analytics.root_cause(down, self.topology, (start_ms, end_ms))

    def apply_correlation(self, start_ms: int, end_ms: int) -> RcaResult:
        """Correlate the window's down events to their root and update history."""
        result = self.rca(start_ms, end_ms)
        with self._lock:
            self.history = analytics.correlate(self.history, self.topology, (start_ms, end_ms))
        return result


# -- scenario runner -------------------------------------------------------------


@dataclass(frozen=True)
class AvailabilityRow:
    component: str
    oracle_ratio: float
    measured_ratio: float | None
    known_ms: int
    transitions: int
    tolerance: float
    delta: float | None
    ok: bool


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SimRunResult:
    scenario: SimScenario
    workers: int
    report: DeadlineReport
    availability: list[AvailabilityRow]
    rca: RcaResult
    expected_roots: frozenset[str]
    down_intervals: dict[str, list[tuple[int, int]]]
    event_count: int
    correlated_count: int
    dedup_max_count: int
    checks: list[CheckResult] = field(default_factory=list)
    service: "ManagementService | None" = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def first_failure(self) -> CheckResult | None:
        for c in self.checks:
            if not c.passed:
                return c
        return None


def run_scenario(
    scenario: SimScenario,
    workers: int | None = None,
    rules: list[ThresholdRule] | None = None,
) -> SimRunResult:
    """Run the whole pipeline over a scenario on the simulated clock.

    Probes every component with sim.ping and sim.metrics, normalizes and
    publishes the results, feeds analytics, then verifies the measured
    availability, root set and deadline behaviour against the scenario's
    analytic ground truth.
    """
    clock = SimulatedClock(0)
    infra = build(scenario)
    registry = DriverRegistry()
    infra.register_drivers(registry, clock)
    service = ManagementService(topology=infra.topology, clock=clock, rules=rules)
    specs = infra.probe_specs()
    latency_est = max(scenario.ping_latency_ms, scenario.metrics_latency_ms)
    if workers is None:
        workers = scenario.workers if scenario.workers is not None else required_workers(specs, latency_est)
    collector = Collector(registry, clock)
    schedule = collector.build_schedule(specs, now_ms=0)
    raws, report = collector.run_cycle(schedule, workers=workers, until_ms=scenario.horizon_ms)
    for raw in raws:
        service.ingest_raw(raw)
    service.process_pending()
    window = (0, scenario.horizon_ms)
    rca = service.apply_correlation(*window)
    expected = infra.expected_roots(window)

    rows: list[AvailabilityRow] = []
    for cid in infra.component_ids():
        oracle = oracle_availability(infra.ground_truth, cid, window)
        measured = service.availability(cid, *window)
        transitions = infra.ground_truth.transition_count(cid, window)
        tolerance_ms = (
            transitions * scenario.probe_period_ms + latency_est + 1
        )
        tolerance = tolerance_ms / (window[1] - window[0])
        delta = None if measured.ratio is None else abs(measured.ratio - oracle)
        rows.append(
            AvailabilityRow(
                component=cid,
                oracle_ratio=oracle,
                measured_ratio=measured.ratio,
                known_ms=measured.known_ms,
                transitions=transitions,
                tolerance=tolerance,
                delta=delta,
                ok=delta is not None and delta <= tolerance,
            )
        )

    with service._lock:
        correlated = sum(1 for ev in service.history if ev.correlated_to is not None)
        event_count = len(service.history)
    dedup_events = service.dedup.open_events() + service.dedup.closed_events()
    dedup_max = max((ev.count for ev in dedup_events), default=0)

    checks: list[CheckResult] = []
    bad = [r for r in rows if not r.ok]
    checks.append(
        CheckResult(
            "availability-within-tolerance",
            not bad,
            "all components within tolerance"
            if not bad
            else f"{bad[0].component}: |{bad[0].measured_ratio} - {bad[0].oracle_ratio:.6f}| > {bad[0].tolerance:.6f}",
        )
    )
    checks.append(
        CheckResult(
            "rca-roots-match-ground-truth",
            rca.roots == expected,
            f"roots={sorted(rca.roots)} expected={sorted(expected)}",
        )
    )
    suppressed_down = set(rca.suppressed)
    if suppressed_down:
        with service._lock:
            uncorrelated = {
                ev.component.id
                for ev in service.history
                if ev.component.id in suppressed_down
                and ev.event_class == "availability"
                and ev.metrics.get("up") == 0.0
                and window[0] <= ev.occurred_at < window[1]
                and ev.correlated_to is None
            }
        checks.append(
            CheckResult(
                "suppressed-events-correlated",
                not uncorrelated,
                "all suppressed components' down events carry correlated_to"
                if not uncorrelated
                else f"uncorrelated down events for {sorted(uncorrelated)}",
            )
        )
    long_failure = any(
        (f.up_at_ms - f.down_at_ms) >= 2 * scenario.probe_period_ms for f in scenario.failures
    )
    if long_failure:
        checks.append(
            CheckResult(
                "dedup-counts-repeats",
                dedup_max > 1,
                f"max dedup count {dedup_max}",
            )
        )
    if scenario.expect_missed is not None:
        ok = (report.missed > 0) if scenario.expect_missed else (report.missed == 0)
        checks.append(
            CheckResult(
                "deadline-expectation",
                ok,
                f"missed={report.missed} expected {'>0' if scenario.expect_missed else '0'}",
            )
        )
    checks.append(
        CheckResult(
            "event-accounting",
            event_count == service.bus.current_seq and report.fired == len(raws),
            f"history={event_count} seq={service.bus.current_seq} fired={report.fired}",
        )
    )

    return SimRunResult(
        scenario=scenario,
        workers=workers,
        report=report,
        availability=rows,
        rca=rca,
        expected_roots=expected,
        down_intervals=dict(infra.ground_truth.down_intervals),
        event_count=event_count,
        correlated_count=correlated,
        dedup_max_count=dedup_max,
        checks=checks,
        service=service,
    )
