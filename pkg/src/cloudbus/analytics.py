"""Event analytics: thresholds, availability, deduplication and root cause.

All functions are pure over their inputs except DedupStore, which owns the
open-alert table for a single pipeline stage.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .bus import EventFilter
from .errors import UnknownComponent, ValidationError
from .events import ComponentId, NormalizedEvent, Severity, make_event
from .topology import CAUSAL_KINDS, Topology


# -- thresholds ----------------------------------------------------------------

class Comparator(str, Enum):
    GT = "gt"
    GE = "ge"
    LT = "lt"
    LE = "le"

    def holds(self, sample: float, bound: float) -> bool:
        if self is Comparator.GT:
            return sample > bound
        if self is Comparator.GE:
            return sample >= bound
        if self is Comparator.LT:
            return sample < bound
        return sample <= bound


@dataclass(frozen=True)
class ThresholdRule:
    """Breach when the comparator holds for `consecutive` samples in a row."""

    rule_id: str
    selector: EventFilter
    metric: str
    comparator: Comparator
    value: float
    consecutive: int = 1
    breach_severity: Severity = Severity.ERROR

    def __post_init__(self) -> None:
        if not self.metric:
            raise ValidationError("threshold rule needs a metric name")
        if self.consecutive < 1:
            raise ValidationError("consecutive must be >= 1")
        object.__setattr__(self, "comparator", Comparator(self.comparator))
        object.__setattr__(self, "breach_severity", Severity.parse(self.breach_severity))


class ThresholdEvaluator:
    """Incremental threshold state for one rule across components.

    Emits one breach event at the sample completing a run of `consecutive`
    breaching samples, and one clear event at the first non-breaching sample
    after an open episode. Breach and clear alternate strictly per component.
    """

    def __init__(self, rule: ThresholdRule):
        self.rule = rule
        self._run: dict[str, int] = {}
        self._open: dict[str, bool] = {}

    def feed(self, ev: NormalizedEvent) -> list[NormalizedEvent]:
        rule = self.rule
        if not rule.selector.matches(ev) or rule.metric not in ev.metrics:
            return []
        cid = ev.component.id
        sample = ev.metrics[rule.metric]
        out: list[NormalizedEvent] = []
        if rule.comparator.holds(sample, rule.value):
            run = self._run.get(cid, 0) + 1
            self._run[cid] = run
            if run >= rule.consecutive and not self._open.get(cid, False):
                self._open[cid] = True
                out.append(
                    make_event(
                        ev.component,
                        "threshold.breach",
                        rule.breach_severity,
                        ev.occurred_at,
                        metrics={rule.metric: sample},
                        message=(
                            f"{rule.rule_id}: {rule.metric} {rule.comparator.value} "
                            f"{rule.value:g} for {rule.consecutive} samples"
                        ),
                    )
                )
        else:
            self._run[cid] = 0
            if self._open.get(cid, False):
                self._open[cid] = False
                out.append(
                    make_event(
                        ev.component,
                        "threshold.clear",
                        Severity.CLEAR,
                        ev.occurred_at,
                        metrics={rule.metric: sample},
                        message=f"{rule.rule_id}: {rule.metric} back within threshold",
                    )
                )
        return out


def eval_threshold(rule: ThresholdRule, samples: Iterable[NormalizedEvent]) -> list[NormalizedEvent]:
    """Evaluate a rule over a time-ordered sample stream (per component)."""
    evaluator = ThresholdEvaluator(rule)
    out: list[NormalizedEvent] = []
    for ev in samples:
        out.extend(evaluator.feed(ev))
    return out


# -- availability ----------------------------------------------------------------

@dataclass(frozen=True)
class AvailabilityWindow:
    """Observed up time over known (monitored) time within a query window.

    ratio is None when nothing was known about the component in the window;
    unknown time is excluded rather than counted as down.
    """

    component: ComponentId
    start_ms: int
    end_ms: int
    up_ms: int
    known_ms: int
    ratio: float | None

    def __post_init__(self) -> None:
        if self.end_ms < self.start_ms:
            raise ValidationError("window end must be >= start")
        if not (0 <= self.up_ms <= self.known_ms <= self.end_ms - self.start_ms):
            raise ValidationError("need 0 <= up_ms <= known_ms <= window length")


def availability(
    component: ComponentId,
    window: tuple[int, int],
    events: Sequence[NormalizedEvent],
) -> AvailabilityWindow:
    """Integrate availability state over a window, last observation carried forward.

    `events` are availability-class events for the component, time-ordered;
    entries before the window seed the state at window start. Each event's
    metrics["up"] is 0.0 or 1.0. Time before the first observation is unknown.
    """
    start, end = int(window[0]), int(window[1])
    if end < start:
        raise ValidationError("window end must be >= start")
    state: float | None = None
    cursor = start
    up_ms = 0
    known_ms = 0

    def integrate(until: int) -> None:
        nonlocal cursor, up_ms, known_ms
        span = max(0, min(until, end) - cursor)
        if span and state is not None:
            known_ms += span
            if state >= 0.5:
                up_ms += span
        cursor = max(cursor, min(until, end))

    for ev in events:
        if ev.component.id != component.id or "up" not in ev.metrics:
            continue
        t = ev.occurred_at
        if t <= start:
            state = ev.metrics["up"]
            continue
        if t >= end:
            break
        integrate(t)
        state = ev.metrics["up"]
    integrate(end)
    ratio = (up_ms / known_ms) if known_ms > 0 else None
    return AvailabilityWindow(
        component=component,
        start_ms=start,
        end_ms=end,
        up_ms=up_ms,
        known_ms=known_ms,
        ratio=ratio,
    )


# -- deduplication -----------------------------------------------------------------

class DedupOutcome(Enum):
    NEW = "new"
    UPDATED = "updated"


@dataclass(frozen=True)
class DedupResult:
    outcome: DedupOutcome
    event: NormalizedEvent


class DedupStore:
    """Open-alert table keyed by dedup key.

    A repeat of an open event (same key and severity) bumps its count and
    last_seen. A clear-severity event closes the open entry for its key; a
    different severity supersedes it. At most one open event per key.
    """

    def __init__(self) -> None:
        self._open: dict[str, NormalizedEvent] = {}
        self._closed: list[NormalizedEvent] = []

    def deduplicate(self, ev: NormalizedEvent) -> DedupResult:
        key = ev.dedup_key
        current = self._open.get(key)
        if ev.severity == Severity.CLEAR:
            if current is not None:
                del self._open[key]
                self._closed.append(current)
                return DedupResult(DedupOutcome.UPDATED, current)
            return DedupResult(DedupOutcome.NEW, ev)
        if current is not None and current.severity == ev.severity:
            updated = replace(
                current,
                count=current.count + 1,
                last_seen=max(current.last_seen, ev.occurred_at),
            )
            self._open[key] = updated
            return DedupResult(DedupOutcome.UPDATED, updated)
        if current is not None:
            # severity changed: the old alert is superseded, not duplicated
            self._closed.append(current)
        self._open[key] = ev
        return DedupResult(DedupOutcome.NEW, ev)

    def open_events(self) -> list[NormalizedEvent]:
        return sorted(self._open.values(), key=lambda e: e.dedup_key)

    def get_open(self, key: str) -> NormalizedEvent | None:
        return self._open.get(key)

    def closed_events(self) -> list[NormalizedEvent]:
        return list(self._closed)


def deduplicate(ev: NormalizedEvent, store: DedupStore) -> DedupResult:
    return store.deduplicate(ev)


# -- root cause analysis --------------------------------------------------------------

@dataclass(frozen=True)
class RcaResult:
    """Roots are down components with no down ancestor; the suppression map
    sends every other down component to its nearest down ancestor."""

    window: tuple[int, int]
    roots: frozenset[str]
    suppressed: Mapping[str, str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "roots", frozenset(self.roots))
        object.__setattr__(self, "suppressed", dict(self.suppressed))
        if self.roots & set(self.suppressed):
            raise ValidationError("roots and suppressed components must be disjoint")

    def ultimate_root(self, component_id: str) -> str:
        """Follow the suppression map transitively to a member of roots."""
        cur = component_id
        seen = set()
        while cur in self.suppressed:
            if cur in seen:
                raise ValidationError("suppression map contains a cycle")
            seen.add(cur)
            cur = self.suppressed[cur]
        return cur


def root_cause(
    down: Iterable[str],
    graph: Topology,
    window: tuple[int, int] = (0, 0),
) -> RcaResult:
    """Localize faults: keep down components with no down ancestor as roots.

    Every other down component is suppressed and mapped to its nearest down
    ancestor (minimum hop count along hosts/depends_on edges, ties broken by
    lexicographically smallest id).
    """
    down_set = set(down)
    for cid in down_set:
        if cid not in graph:
            raise UnknownComponent(cid)
    roots: set[str] = set()
    suppressed: dict[str, str] = {}
    for cid in sorted(down_set):
        nearest: str | None = None
        for level in graph.ancestor_levels(cid, CAUSAL_KINDS):
            down_here = sorted(set(level) & down_set)
            if down_here:
                nearest = down_here[0]
                break
        if nearest is None:
            roots.add(cid)
        else:
            suppressed[cid] = nearest
    return RcaResult(window=tuple(window), roots=frozenset(roots), suppressed=suppressed)


def _is_down_observation(ev: NormalizedEvent) -> bool:
    return ev.event_class == "availability" and ev.metrics.get("up") == 0.0


def correlate(
    events: Sequence[NormalizedEvent],
    graph: Topology,
    window: tuple[int, int],
) -> list[NormalizedEvent]:
    """Set correlated_to on down events of suppressed components.

    The down set is every component with an availability up=0 event inside
    [start, end); suppressed components' in-window down events point at the
    ultimate root's earliest down event. Root events and everything outside
    the window are returned unchanged.
    """
    start, end = int(window[0]), int(window[1])

    def in_window(ev: NormalizedEvent) -> bool:
        return start <= ev.occurred_at < end and _is_down_observation(ev)

    down_comps = {ev.component.id for ev in events if in_window(ev)}
    if not down_comps:
        return list(events)
    rca = root_cause(down_comps, graph, (start, end))
    root_event: dict[str, str] = {}
    for ev in sorted((e for e in events if in_window(e)), key=lambda e: (e.occurred_at, e.event_id)):
        cid = ev.component.id
        if cid in rca.roots and cid not in root_event:
            root_event[cid] = ev.event_id
    out: list[NormalizedEvent] = []
    for ev in events:
        cid = ev.component.id
        if in_window(ev) and cid in rca.suppressed:
            target = root_event.get(rca.ultimate_root(cid))
            if target is not None and target != ev.event_id:
                ev = replace(ev, correlated_to=target)
        out.append(ev)
    return out
