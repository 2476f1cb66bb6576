"""Agentless collector: periodic probes under hard deadlines on a bounded pool.

Probes are released at their due times and dispatched earliest-deadline-first
(due + deadline, ties by probe id). On a simulated clock the cycle runs as a
deterministic discrete-event simulation that models `workers` parallel
executors through per-worker availability times; on the system clock it runs
on a real thread pool. Rate budgets and credential scoping are enforced at
release time; driver failures become probe_error results, never exceptions.
"""

from __future__ import annotations

import heapq
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping

from .clock import Clock, SystemClock
from .errors import (
    DuplicateDriver,
    UnauthorizedProbe,
    UnknownDriver,
    ValidationError,
)
from .events import ComponentId, RawEvent, Scalar

log = logging.getLogger(__name__)

DEFAULT_MAX_PROBES_PER_SEC = 5.0
DEFAULT_BURST = 5


class Outcome(str, Enum):
    UP = "up"
    DOWN = "down"
    DEGRADED = "degraded"
    PROBE_ERROR = "probe_error"


@dataclass(frozen=True)
class DriverResult:
    """What a probe driver reports back.

    latency_ms is the declared service time (simulated drivers); when None
    the collector uses the measured wall time.
    """

    outcome: Outcome
    metrics: Mapping[str, float] = field(default_factory=dict)
    latency_ms: float | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        object.__setattr__(self, "metrics", dict(self.metrics))


DriverFn = Callable[[ComponentId, Mapping[str, Scalar], "CredentialRecord | None"], DriverResult]


class DriverRegistry:
    """Named probe drivers; names are registered once."""

    def __init__(self) -> None:
        self._drivers: dict[str, DriverFn] = {}

    def register(self, name: str, driver: DriverFn) -> None:
        if name in self._drivers:
            raise DuplicateDriver(name)
        self._drivers[name] = driver

    def get(self, name: str) -> DriverFn:
        try:
            return self._drivers[name]
        except KeyError:
            raise UnknownDriver(name) from None

    def names(self) -> list[str]:
        return sorted(self._drivers)


@dataclass(frozen=True)
class CredentialRecord:
    """Scoped probe credential; the secret never reaches events or logs."""

    cred_id: str
    secret: str
    scope: frozenset[str]  # component kinds and/or explicit component ids

    def __post_init__(self) -> None:
        object.__setattr__(self, "scope", frozenset(str(s) for s in self.scope))

    def __repr__(self) -> str:
        return f"CredentialRecord(cred_id={self.cred_id!r}, secret='***', scope={sorted(self.scope)})"

    def authorizes(self, target: ComponentId) -> bool:
        return target.kind.value in self.scope or target.id in self.scope


def authorize_probe(cred: CredentialRecord, target: ComponentId) -> bool:
    """True iff the credential's scope covers the target's kind or id."""
    return cred.authorizes(target)


@dataclass(frozen=True)
class ProbeSpec:
    probe_id: str
    target: ComponentId
    driver: str
    period_ms: int
    deadline_ms: int
    credential_ref: str | None = None
    params: Mapping[str, Scalar] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.probe_id:
            raise ValidationError("probe_id must be nonempty")
        if self.period_ms <= 0:
            raise ValidationError(f"{self.probe_id}: period_ms must be > 0")
        if not (0 < self.deadline_ms <= self.period_ms):
            raise ValidationError(f"{self.probe_id}: need 0 < deadline_ms <= period_ms")
        object.__setattr__(self, "params", dict(self.params))


@dataclass(frozen=True)
class RateBudget:
    """Token-bucket probe budget for one target.

    The bucket starts with at most half a second's worth of tokens rather
    than a full burst (no credit for unobserved past), which keeps the
    observed rate over any window of 10 s or more within 1.05 x
    max_probes_per_sec under continuous demand. `burst` caps what can accrue
    across idle gaps.
    """

    target: str
    max_probes_per_sec: float = DEFAULT_MAX_PROBES_PER_SEC
    burst: int = DEFAULT_BURST

    def __post_init__(self) -> None:
        if self.max_probes_per_sec <= 0:
            raise ValidationError("max_probes_per_sec must be > 0")
        if self.burst < 1:
            raise ValidationError("burst must be >= 1")


class _TokenBucket:
    def __init__(self, budget: RateBudget, now_ms: int):
        self.rate = budget.max_probes_per_sec
        self.burst = float(budget.burst)
        self.tokens = min(self.burst, max(1.0, self.rate / 2.0))
        self.last_ms = now_ms

    def allow(self, now_ms: int) -> bool:
        elapsed = max(0, now_ms - self.last_ms) / 1000.0
        self.tokens = min(self.burst, self.tokens + elapsed * self.rate)
        self.last_ms = now_ms
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False


@dataclass(frozen=True)
class ProbeResult:
    probe_id: str
    scheduled_due_at: int
    started_at: int
    finished_at: int
    outcome: Outcome
    latency_ms: float
    metrics: Mapping[str, float] = field(default_factory=dict)
    deadline_missed: bool = False
    deadline_ms: int = 0
    error: str | None = None

    def __post_init__(self) -> None:
        if self.finished_at < self.started_at:
            raise ValidationError("finished_at must be >= started_at")
        if self.latency_ms < 0:
            raise ValidationError("latency_ms must be >= 0")
        expected = (self.finished_at - self.scheduled_due_at) > self.deadline_ms
        if bool(self.deadline_missed) != expected:
            raise ValidationError("deadline_missed inconsistent with timestamps")
        object.__setattr__(self, "metrics", dict(self.metrics))


@dataclass(frozen=True)
class DeadlineReport:
    window_start_ms: int
    window_end_ms: int
    fired: int
    missed: int
    worst_lateness_ms: int
    suppressed: int = 0
    overruns: int = 0

    def __post_init__(self) -> None:
        if self.missed > self.fired:
            raise ValidationError("missed cannot exceed fired")
        if self.worst_lateness_ms < 0:
            raise ValidationError("worst_lateness_ms must be >= 0")


class _Entry:
    """Mutable schedule state for one probe spec."""

    __slots__ = ("spec", "credential", "next_due", "pending", "busy_until")

    def __init__(self, spec: ProbeSpec, credential: CredentialRecord | None, start_ms: int):
        self.spec = spec
        self.credential = credential
        self.next_due = start_ms
        self.pending = False      # released (queued or running), not yet finished
        self.busy_until = -1      # finish time of the last dispatched firing

    def overlaps(self, due: int) -> bool:
        return self.pending or self.busy_until > due


class Schedule:
    """Release plan for a set of probe specs: due times start + k * period."""

    def __init__(self, entries: list[_Entry], start_ms: int):
        self.entries = sorted(entries, key=lambda e: e.spec.probe_id)
        self.start_ms = start_ms

    def __len__(self) -> int:
        return len(self.entries)

    def next_release(self, limit_ms: int) -> int | None:
        dues = [e.next_due for e in self.entries if e.next_due <= limit_ms]
        return min(dues) if dues else None


class Collector:
    """Schedules and executes probes against registered drivers."""

    def __init__(
        self,
        registry: DriverRegistry,
        clock: Clock | None = None,
        credentials: Mapping[str, CredentialRecord] | None = None,
        budgets: Iterable[RateBudget] = (),
    ):
        self.registry = registry
        self.clock = clock if clock is not None else SystemClock()
        self.credentials = dict(credentials or {})
        self._budgets = {b.target: b for b in budgets}
        self._buckets: dict[str, _TokenBucket] = {}
        self._lock = threading.Lock()

    def _bucket(self, target: ComponentId, now_ms: int) -> _TokenBucket:
        bucket = self._buckets.get(target.id)
        if bucket is None:
            budget = self._budgets.get(target.id, RateBudget(target=target.id))
            bucket = _TokenBucket(budget, now_ms)
            self._buckets[target.id] = bucket
        return bucket

    def build_schedule(self, specs: Iterable[ProbeSpec], now_ms: int | None = None) -> Schedule:
        """Validate specs against drivers and credential scopes.

        Raises UnknownDriver for unregistered drivers and UnauthorizedProbe
        when a referenced credential does not cover the target.
        """
        start = self.clock.now_ms() if now_ms is None else int(now_ms)
        entries: list[_Entry] = []
        seen: set[str] = set()
        for spec in specs:
            if spec.probe_id in seen:
                raise ValidationError(f"duplicate probe_id {spec.probe_id!r}")
            seen.add(spec.probe_id)
            self.registry.get(spec.driver)
            credential = None
            if spec.credential_ref is not None:
                credential = self.credentials.get(spec.credential_ref)
                if credential is None:
                    raise UnauthorizedProbe(f"{spec.probe_id}: unknown credential {spec.credential_ref!r}")
                if not authorize_probe(credential, spec.target):
                    raise UnauthorizedProbe(
                        f"{spec.probe_id}: credential {spec.credential_ref!r} does not cover {spec.target.id}"
                    )
            entries.append(_Entry(spec, credential, start))
        return Schedule(entries, start)

    # -- execution ----------------------------------------------------------------

    def run_cycle(
        self,
        schedule: Schedule,
        workers: int,
        until_ms: int,
        on_event: Callable[[RawEvent], None] | None = None,
    ) -> tuple[list[RawEvent], DeadlineReport]:
        """Execute every release due in (schedule position, until_ms].

        Releases at the boundary are included; firings already released run to
        completion even past until_ms. Returns one RawEvent per fired probe
        and the deadline report for the window.
        """
        if workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.clock.is_virtual:
            return self._run_virtual(schedule, workers, until_ms, on_event)
        return self._run_live(schedule, workers, until_ms, on_event)

    def _invoke(self, entry: _Entry) -> DriverResult:
        driver = self.registry.get(entry.spec.driver)
        try:
            result = driver(entry.spec.target, entry.spec.params, entry.credential)
        except Exception as exc:  # driver errors are data, not control flow
            log.warning("driver %s failed on %s: %s", entry.spec.driver, entry.spec.target.id, exc)
            return DriverResult(outcome=Outcome.PROBE_ERROR, error=str(exc))
        return result

    @staticmethod
    def _to_raw(spec: ProbeSpec, result: ProbeResult) -> RawEvent:
        payload: dict[str, Scalar] = {
            "target": spec.target.id,
            "kind": spec.target.kind.value,
            "outcome": result.outcome.value,
            "latency_ms": float(result.latency_ms),
            "deadline_missed": result.deadline_missed,
        }
        if result.error is not None:
            payload["error"] = result.error
        for key, value in result.metrics.items():
            payload[key] = float(value)
        return RawEvent(
            source_kind=f"probe.{spec.driver}",
            received_at=result.finished_at,
            payload=payload,
        )

    def _release_due(self, schedule: Schedule, t: int, until_ms: int, ready: list, stats: dict) -> None:
        limit = min(t, until_ms)
        for entry in schedule.entries:
            while entry.next_due <= limit:
                due = entry.next_due
                entry.next_due += entry.spec.period_ms
                if entry.overlaps(due):
                    stats["overruns"] += 1
                    continue
                if not self._bucket(entry.spec.target, due).allow(due):
                    stats["suppressed"] += 1
                    continue
                entry.pending = True
                heapq.heappush(ready, ((due + entry.spec.deadline_ms, entry.spec.probe_id), due, entry))

    def _run_virtual(
        self,
        schedule: Schedule,
        workers: int,
        until_ms: int,
        on_event: Callable[[RawEvent], None] | None,
    ) -> tuple[list[RawEvent], DeadlineReport]:
        clock = self.clock
        start = clock.now_ms()
        free = [start] * workers
        heapq.heapify(free)
        ready: list = []
        raws: list[RawEvent] = []
        stats = {"fired": 0, "missed": 0, "suppressed": 0, "overruns": 0, "worst": 0}
        t = start
        while True:
            self._release_due(schedule, t, until_ms, ready, stats)
            while ready and free[0] <= t:
                heapq.heappop(free)
                _, due, entry = heapq.heappop(ready)
                if clock.now_ms() < t:
                    clock.advance_to(t)
                result = self._invoke(entry)
                latency = float(result.latency_ms) if result.latency_ms is not None else 0.0
                started = t
                finished = started + int(round(latency))
                entry.pending = False
                entry.busy_until = finished
                probe_result = ProbeResult(
                    probe_id=entry.spec.probe_id,
                    scheduled_due_at=due,
                    started_at=started,
                    finished_at=finished,
                    outcome=result.outcome,
                    latency_ms=latency,
                    metrics=result.metrics,
                    deadline_missed=(finished - due) > entry.spec.deadline_ms,
                    deadline_ms=entry.spec.deadline_ms,
                    error=result.error,
                )
                stats["fired"] += 1
                if probe_result.deadline_missed:
                    stats["missed"] += 1
                    stats["worst"] = max(stats["worst"], finished - due - entry.spec.deadline_ms)
                raw = self._to_raw(entry.spec, probe_result)
                raws.append(raw)
                if on_event is not None:
                    on_event(raw)
                heapq.heappush(free, finished)
            next_rel = schedule.next_release(until_ms)
            candidates = []
            if next_rel is not None:
                candidates.append(next_rel)
            if ready:
                candidates.append(free[0])
            if not candidates:
                break
            t = max(t, min(candidates))
        if clock.now_ms() < until_ms:
            clock.advance_to(until_ms)
        report = DeadlineReport(
            window_start_ms=start,
            window_end_ms=until_ms,
            fired=stats["fired"],
            missed=stats["missed"],
            worst_lateness_ms=stats["worst"],
            suppressed=stats["suppressed"],
            overruns=stats["overruns"],
        )
        return raws, report

    def _run_live(
        self,
        schedule: Schedule,
        workers: int,
        until_ms: int,
        on_event: Callable[[RawEvent], None] | None,
    ) -> tuple[list[RawEvent], DeadlineReport]:
        clock = self.clock
        start = clock.now_ms()
        raws: list[RawEvent] = []
        stats = {"fired": 0, "missed": 0, "suppressed": 0, "overruns": 0, "worst": 0}
        inflight = 0
        done = threading.Condition()

        def execute(entry: _Entry, due: int) -> None:
            nonlocal inflight
            started = clock.now_ms()
            t0 = time.perf_counter()
            result = self._invoke(entry)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            latency = float(result.latency_ms) if result.latency_ms is not None else wall_ms
            finished = max(clock.now_ms(), started)
            probe_result = ProbeResult(
                probe_id=entry.spec.probe_id,
                scheduled_due_at=due,
                started_at=started,
                finished_at=finished,
                outcome=result.outcome,
                latency_ms=latency,
                metrics=result.metrics,
                deadline_missed=(finished - due) > entry.spec.deadline_ms,
                deadline_ms=entry.spec.deadline_ms,
                error=result.error,
            )
            raw = self._to_raw(entry.spec, probe_result)
            with done:
                entry.pending = False
                entry.busy_until = finished
                stats["fired"] += 1
                if probe_result.deadline_missed:
                    stats["missed"] += 1
                    stats["worst"] = max(stats["worst"], finished - due - entry.spec.deadline_ms)
                raws.append(raw)
                inflight -= 1
                done.notify_all()
            if on_event is not None:
                on_event(raw)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            while True:
                now = clock.now_ms()
                batch: list = []
                with done:
                    limit = min(now, until_ms)
                    for entry in schedule.entries:
                        while entry.next_due <= limit:
                            due = entry.next_due
                            entry.next_due += entry.spec.period_ms
                            if entry.overlaps(due):
                                stats["overruns"] += 1
                                continue
                            if not self._bucket(entry.spec.target, due).allow(due):
                                stats["suppressed"] += 1
                                continue
                            entry.pending = True
                            heapq.heappush(batch, ((due + entry.spec.deadline_ms, entry.spec.probe_id), due, entry))
                    inflight += len(batch)
                while batch:
                    _, due, entry = heapq.heappop(batch)
                    pool.submit(execute, entry, due)
                next_rel = schedule.next_release(until_ms)
                if next_rel is None:
                    with done:
                        while inflight > 0:
                            done.wait(0.05)
                    break
                clock.sleep_ms(min(max(next_rel - clock.now_ms(), 0), 25))
        report = DeadlineReport(
            window_start_ms=start,
            window_end_ms=until_ms,
            fired=stats["fired"],
            missed=stats["missed"],
            worst_lateness_ms=stats["worst"],
            suppressed=stats["suppressed"],
            overruns=stats["overruns"],
        )
        return raws, report


def required_workers(specs: Iterable[ProbeSpec], driver_latency_ms: float) -> int:
    """Minimum worker count for zero misses with a homogeneous latency estimate.

    Combines the steady-state utilization bound (sum of latency/period) with
    the synchronized-release wave bound: with all probes released at once and
    served earliest-deadline-first, each worker completes floor(deadline /
    latency) firings inside a deadline, so the j-th tightest deadline needs
    ceil(j / floor(d_j / latency)) workers. Probes whose deadline is shorter
    than the latency cannot meet it at any worker count and are excluded.
    """
    spec_list = list(specs)
    if not spec_list or driver_latency_ms <= 0:
        return 1
    utilization = sum(driver_latency_ms / s.period_ms for s in spec_list)
    wave = 1
    deadlines = sorted(s.deadline_ms for s in spec_list if s.deadline_ms >= driver_latency_ms)
    for j, deadline in enumerate(deadlines, start=1):
        per_worker = int(deadline // driver_latency_ms)
        wave = max(wave, -(-j // per_worker))
    return max(1, math.ceil(utilization - 1e-9), wave)
