"""Common event format and normalization of heterogeneous raw observations.

Every observation entering the system, whether produced by a probe driver or
pushed by an external script, is converted into a :class:`NormalizedEvent` so
that the bus, the status view and the analytics stages all consume one record
shape. Events are immutable; updates (dedup counters, correlation) produce
new instances via ``dataclasses.replace``.
"""

from __future__ import annotations

import json
import re
import secrets
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from fnmatch import fnmatchcase
from typing import Any, Callable, Mapping

from .errors import (
    InvalidComponent,
    MalformedLine,
    MissingField,
    NoMatchingRule,
    SchemaViolation,
    ValidationError,
)

Scalar = str | float | int | bool

_CLASS_RE = re.compile(r"[a-z0-9_-]+(\.[a-z0-9_-]+)*")
_FORBIDDEN_ID_CHARS = ("|", "\n", "\r")


class ComponentKind(str, Enum):
    PHYSICAL_HOST = "physical_host"
    NETWORK_SWITCH = "network_switch"
    VM = "vm"
    SERVICE = "service"
    EXTERNAL = "external"


class Severity(IntEnum):
    """Totally ordered severity scale; CLEAR is the unique minimum."""

    CLEAR = 0
    INFO = 1
    WARNING = 2
    ERROR = 3
    CRITICAL = 4

    @classmethod
    def parse(cls, value: Any) -> "Severity":
        if isinstance(value, Severity):
            return value
        if isinstance(value, bool):
            raise ValidationError(f"not a severity: {value!r}")
        if isinstance(value, int):
            try:
                return cls(value)
            except ValueError:
                raise ValidationError(f"not a severity level: {value!r}") from None
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValidationError(f"not a severity name: {value!r}") from None
        raise ValidationError(f"not a severity: {value!r}")


@dataclass(frozen=True)
class ComponentId:
    """Identity of an infrastructure component.

    The id must be nonempty and free of ``|`` and newlines, which are
    reserved by dedup keys and the NDJSON wire format.
    """

    id: str
    kind: ComponentKind

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise InvalidComponent("component id must be a nonempty string")
        if any(c in self.id for c in _FORBIDDEN_ID_CHARS):
            raise InvalidComponent(f"component id contains reserved character: {self.id!r}")
        if not isinstance(self.kind, ComponentKind):
            try:
                object.__setattr__(self, "kind", ComponentKind(self.kind))
            except ValueError:
                raise InvalidComponent(f"unknown component kind: {self.kind!r}") from None


@dataclass(frozen=True)
class RawEvent:
    """An observation as produced by a driver or external source."""

    source_kind: str
    received_at: int
    payload: Mapping[str, Scalar]

    def __post_init__(self) -> None:
        if int(self.received_at) < 0:
            raise ValidationError("received_at must be >= 0")
        object.__setattr__(self, "received_at", int(self.received_at))
        object.__setattr__(self, "payload", dict(self.payload))


def dedup_key(component: ComponentId | str, event_class: str) -> str:
    """Deduplication identity of an event: ``<component id>|<class>``."""
    cid = component.id if isinstance(component, ComponentId) else component
    return f"{cid}|{event_class}"


def new_event_id() -> str:
    """128-bit random id rendered as 32 hex chars; unique without coordination."""
    return secrets.token_hex(16)


@dataclass(frozen=True)
class NormalizedEvent:
    """The common event record all pipeline stages consume."""

    event_id: str
    occurred_at: int
    component: ComponentId
    event_class: str
    severity: Severity
    metrics: Mapping[str, float] = field(default_factory=dict)
    message: str = ""
    count: int = 1
    first_seen: int = -1
    last_seen: int = -1
    correlated_to: str | None = None

    def __post_init__(self) -> None:
        if not self.event_id:
            raise ValidationError("event_id must be nonempty")
        if not isinstance(self.component, ComponentId):
            raise ValidationError("component must be a ComponentId")
        if int(self.occurred_at) < 0:
            raise ValidationError("occurred_at must be >= 0")
        object.__setattr__(self, "occurred_at", int(self.occurred_at))
        if not _CLASS_RE.fullmatch(self.event_class or ""):
            raise ValidationError(f"invalid event class: {self.event_class!r}")
        object.__setattr__(self, "severity", Severity.parse(self.severity))
        metrics = {}
        for key, value in dict(self.metrics).items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValidationError(f"metric {key!r} is not numeric: {value!r}")
            metrics[str(key)] = float(value)
        object.__setattr__(self, "metrics", metrics)
        if self.first_seen < 0:
            object.__setattr__(self, "first_seen", self.occurred_at)
        if self.last_seen < 0:
            object.__setattr__(self, "last_seen", self.occurred_at)
        if int(self.count) < 1:
            raise ValidationError("count must be >= 1")
        object.__setattr__(self, "count", int(self.count))
        if self.first_seen > self.last_seen:
            raise ValidationError("first_seen must be <= last_seen")
        if self.count == 1 and self.first_seen != self.last_seen:
            raise ValidationError("count == 1 implies first_seen == last_seen")

    @property
    def dedup_key(self) -> str:
        return dedup_key(self.component, self.event_class)

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "occurred_at": self.occurred_at,
            "component": {"id": self.component.id, "kind": self.component.kind.value},
            "class": self.event_class,
            "severity": self.severity.name.lower(),
            "metrics": dict(self.metrics),
            "message": self.message,
            "dedup_key": self.dedup_key,
            "count": self.count,
            "first_seen": self.first_seen,
            "last_seen": self.last_seen,
            "correlated_to": self.correlated_to,
        }


def make_event(
    component: ComponentId,
    event_class: str,
    severity: Severity,
    occurred_at: int,
    *,
    metrics: Mapping[str, float] | None = None,
    message: str = "",
    correlated_to: str | None = None,
) -> NormalizedEvent:
    """Build a fresh event with a generated id and count 1."""
    return NormalizedEvent(
        event_id=new_event_id(),
        occurred_at=occurred_at,
        component=component,
        event_class=event_class,
        severity=severity,
        metrics=dict(metrics or {}),
        message=message,
        correlated_to=correlated_to,
    )


# -- NDJSON wire format -------------------------------------------------------

def encode_ndjson(ev: NormalizedEvent) -> str:
    """Encode one event as a single NDJSON line (no trailing newline)."""
    return json.dumps(ev.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def decode_ndjson(line: str) -> NormalizedEvent:
    """Decode one NDJSON line; unknown fields are ignored.

    Raises MalformedLine when the line is not JSON, SchemaViolation when it
    parses but does not satisfy the event invariants.
    """
    try:
        obj = json.loads(line)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedLine(f"not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedLine("event line must be a JSON object")
    for key in ("event_id", "occurred_at", "component", "class", "severity"):
        if key not in obj:
            raise SchemaViolation(f"missing required field {key!r}")
    comp = obj["component"]
    if not isinstance(comp, dict) or "id" not in comp or "kind" not in comp:
        raise SchemaViolation("component must be an object with id and kind")
    metrics = obj.get("metrics", {})
    if not isinstance(metrics, dict):
        raise SchemaViolation("metrics must be an object")
    try:
        occurred = int(obj["occurred_at"])
        ev = NormalizedEvent(
            event_id=str(obj["event_id"]),
            occurred_at=occurred,
            component=ComponentId(comp["id"], comp["kind"]),
            event_class=str(obj["class"]),
            severity=Severity.parse(obj["severity"]),
            metrics=metrics,
            message=str(obj.get("message", "")),
            count=int(obj.get("count", 1)),
            first_seen=int(obj.get("first_seen", occurred)),
            last_seen=int(obj.get("last_seen", occurred)),
            correlated_to=obj.get("correlated_to"),
        )
    except (ValidationError, InvalidComponent) as exc:
        raise SchemaViolation(str(exc)) from None
    except (TypeError, ValueError) as exc:
        raise SchemaViolation(f"bad field value: {exc}") from None
    declared = obj.get("dedup_key")
    if declared is not None and declared != ev.dedup_key:
        raise SchemaViolation(f"dedup_key {declared!r} does not match component and class")
    return ev


# -- normalization ruleset ----------------------------------------------------

@dataclass(frozen=True)
class MappedFields:
    """Output of a rule's field mapping, before event assembly."""

    component: ComponentId
    event_class: str
    severity: Severity
    metrics: Mapping[str, float]
    message: str = ""
    occurred_at: int | None = None


@dataclass(frozen=True)
class NormalizationRule:
    """One entry of the ruleset: a match predicate plus a field mapping.

    A rule matches when the source kind satisfies ``source_glob`` and every
    key in ``required_keys`` is present in the payload. The mapper may still
    raise MissingField for keys it needs beyond the match set.
    """

    name: str
    source_glob: str
    required_keys: frozenset[str]
    mapper: Callable[[RawEvent], MappedFields]

    def matches(self, raw: RawEvent) -> bool:
        return fnmatchcase(raw.source_kind, self.source_glob) and self.required_keys <= raw.payload.keys()


class NormalizationRuleset:
    """Ordered rule list; the first matching rule wins."""

    def __init__(self, rules: list[NormalizationRule]):
        self.rules = list(rules)

    def first_match(self, raw: RawEvent) -> NormalizationRule | None:
        for rule in self.rules:
            if rule.matches(raw):
                return rule
        return None


def _need(raw: RawEvent, key: str) -> Scalar:
    try:
        return raw.payload[key]
    except KeyError:
        raise MissingField(f"payload key {key!r} required by matched rule") from None


def _component_from(raw: RawEvent, id_key: str = "target", kind_key: str = "kind") -> ComponentId:
    return ComponentId(str(_need(raw, id_key)), str(_need(raw, kind_key)))


def _is_up(value: Scalar) -> bool:
    if isinstance(value, str):
        return value.lower() in ("up", "true", "1", "yes")
    return bool(value)


def _numeric_metrics(payload: Mapping[str, Scalar], exclude: frozenset[str]) -> dict[str, float]:
    out = {}
    for key, value in payload.items():
        if key in exclude or isinstance(value, bool):
            continue
        if isinstance(value, (int, float)):
            out[key] = float(value)
    return out


_RESERVED_PROBE_KEYS = frozenset({"target", "kind", "outcome", "deadline_missed", "error"})


def _map_passthrough(raw: RawEvent) -> MappedFields:
    component = ComponentId(str(_need(raw, "component_id")), str(_need(raw, "component_kind")))
    metrics = {
        key[len("metric.") :]: float(value)
        for key, value in raw.payload.items()
        if key.startswith("metric.") and isinstance(value, (int, float)) and not isinstance(value, bool)
    }
    occurred = raw.payload.get("occurred_at")
    return MappedFields(
        component=component,
        event_class=str(_need(raw, "class")),
        severity=Severity.parse(_need(raw, "severity")),
        metrics=metrics,
        message=str(raw.payload.get("message", "")),
        occurred_at=None if occurred is None else int(occurred),
    )


def _map_ping(raw: RawEvent) -> MappedFields:
    component = _component_from(raw)
    up = _is_up(_need(raw, "up"))
    return MappedFields(
        component=component,
        event_class="availability",
        severity=Severity.CLEAR if up else Severity.CRITICAL,
        metrics={"up": 1.0 if up else 0.0},
        message=f"{component.id} is {'up' if up else 'down'}",
    )


def _availability_fields(raw: RawEvent, outcome: str) -> MappedFields:
    component = _component_from(raw)
    if outcome == "probe_error":
        return MappedFields(
            component=component,
            event_class="probe.error",
            severity=Severity.ERROR,
            metrics={},
            message=f"probe error on {component.id}: {raw.payload.get('error', 'unknown')}",
        )
    up = outcome in ("up", "degraded")
    severity = {"up": Severity.CLEAR, "degraded": Severity.WARNING}.get(outcome, Severity.CRITICAL)
    return MappedFields(
        component=component,
        event_class="availability",
        severity=severity,
        metrics={"up": 1.0 if up else 0.0},
        message=f"{component.id} is {outcome}",
    )


def _map_metrics(raw: RawEvent) -> MappedFields:
    outcome = str(raw.payload.get("outcome", "up"))
    if outcome != "up":
        return _availability_fields(raw, outcome)
    component = _component_from(raw)
    return MappedFields(
        component=component,
        event_class="perf",
        severity=Severity.INFO,
        metrics=_numeric_metrics(raw.payload, _RESERVED_PROBE_KEYS),
        message=f"metrics for {component.id}",
    )


def _map_probe_status(raw: RawEvent) -> MappedFields:
    return _availability_fields(raw, str(_need(raw, "outcome")))


#: Built-in rule table, ordered. First match wins:
#:   1. payloads that already carry every normalized field verbatim
#:   2. ping-style availability probes ({target, kind, up})
#:   3. metrics probes (perf samples; non-up outcomes fall back to status)
#:   4. any collector-produced probe result ({target, kind, outcome})
BUILTIN_RULESET = NormalizationRuleset(
    [
        NormalizationRule(
            name="passthrough",
            source_glob="*",
            required_keys=frozenset({"component_id", "component_kind", "class", "severity"}),
            mapper=_map_passthrough,
        ),
        NormalizationRule(
            name="ping",
            source_glob="*ping*",
            required_keys=frozenset({"target", "up"}),
            mapper=_map_ping,
        ),
        NormalizationRule(
            name="metrics",
            source_glob="*metrics*",
            required_keys=frozenset({"target", "kind"}),
            mapper=_map_metrics,
        ),
        NormalizationRule(
            name="probe-status",
            source_glob="probe.*",
            required_keys=frozenset({"target", "kind", "outcome"}),
            mapper=_map_probe_status,
        ),
    ]
)


def normalize(raw: RawEvent, rules: NormalizationRuleset | None = None) -> NormalizedEvent:
    """Convert a raw observation into the common format.

    The first matching rule of the ruleset decides the field mapping;
    occurred_at falls back to the raw event's received_at when the rule maps
    no timestamp. The returned event is fresh: count 1, first and last seen
    equal to occurred_at, newly generated event id.
    """
    ruleset = rules if rules is not None else BUILTIN_RULESET
    rule = ruleset.first_match(raw)
    if rule is None:
        raise NoMatchingRule(f"no rule matches source {raw.source_kind!r} with keys {sorted(raw.payload)}")
    mapped = rule.mapper(raw)
    occurred = raw.received_at if mapped.occurred_at is None else mapped.occurred_at
    return NormalizedEvent(
        event_id=new_event_id(),
        occurred_at=occurred,
        component=mapped.component,
        event_class=mapped.event_class,
        severity=mapped.severity,
        metrics=mapped.metrics,
        message=mapped.message,
    )


def as_raw(ev: NormalizedEvent, source_kind: str = "normalized") -> RawEvent:
    """Render an event as a passthrough-shaped raw observation.

    Feeding the result back through :func:`normalize` reproduces the event
    field-equal except event_id, provided the event is fresh (count 1 and
    no correlation).
    """
    payload: dict[str, Scalar] = {
        "component_id": ev.component.id,
        "component_kind": ev.component.kind.value,
        "class": ev.event_class,
        "severity": ev.severity.name.lower(),
        "occurred_at": ev.occurred_at,
        "message": ev.message,
    }
    for key, value in ev.metrics.items():
        payload[f"metric.{key}"] = value
    return RawEvent(source_kind=source_kind, received_at=ev.occurred_at, payload=payload)


def replace_event(ev: NormalizedEvent, **changes: Any) -> NormalizedEvent:
    """dataclasses.replace with event invariants re-checked."""
    return replace(ev, **changes)
