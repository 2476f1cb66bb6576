"""Structured config file loading for probes, credentials, budgets, rules,
scenarios and tokens. Files are YAML (JSON is accepted as a YAML subset);
errors name the offending key.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from .analytics import Comparator, ThresholdRule
from .bus import EventFilter, Role
from .collector import CredentialRecord, ProbeSpec, RateBudget
from .errors import ConfigError
from .events import ComponentId, Severity
from .sim import Failure, SimScenario
from .topology import Topology


@dataclass(frozen=True)
class CollectorOptions:
    workers: int = 4
    tick_ms: int = 250


@dataclass(frozen=True)
class TokenEntry:
    token: str
    roles: frozenset[Role]
    label: str = ""


@dataclass
class AppConfig:
    probes: list[ProbeSpec] = field(default_factory=list)
    credentials: dict[str, CredentialRecord] = field(default_factory=dict)
    budgets: list[RateBudget] = field(default_factory=list)
    rules: list[ThresholdRule] = field(default_factory=list)
    scenario: SimScenario | None = None
    topology: Topology | None = None
    collector: CollectorOptions = field(default_factory=CollectorOptions)
    correlation_window_ms: int = 30_000


def _require(entry: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in entry:
        raise ConfigError(f"{where}: missing key {key!r}")
    return entry[key]


def _parse_filter(data: Mapping[str, Any] | None, where: str) -> EventFilter:
    if not data:
        return EventFilter()
    try:
        kinds = data.get("kinds")
        return EventFilter(
            component_kinds=frozenset(kinds) if kinds else None,
            class_glob=data.get("class"),
            min_severity=Severity.parse(data["min_severity"]) if "min_severity" in data else None,
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{where}: bad selector: {exc}") from None


def parse_config(data: Mapping[str, Any] | None) -> AppConfig:
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError("config root must be a mapping")
    cfg = AppConfig()

    for idx, entry in enumerate(data.get("credentials") or []):
        where = f"credentials[{idx}]"
        cred = CredentialRecord(
            cred_id=str(_require(entry, "id", where)),
            secret=str(_require(entry, "secret", where)),
            scope=frozenset(str(s) for s in _require(entry, "scope", where)),
        )
        cfg.credentials[cred.cred_id] = cred

    for idx, entry in enumerate(data.get("probes") or []):
        where = f"probes[{idx}]"
        try:
            target = ComponentId(str(_require(entry, "target", where)), _require(entry, "kind", where))
            cfg.probes.append(
                ProbeSpec(
                    probe_id=str(_require(entry, "id", where)),
                    target=target,
                    driver=str(_require(entry, "driver", where)),
                    period_ms=int(_require(entry, "period_ms", where)),
                    deadline_ms=int(_require(entry, "deadline_ms", where)),
                    credential_ref=entry.get("credential"),
                    params=entry.get("params") or {},
                )
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: {exc}") from None

    for idx, entry in enumerate(data.get("budgets") or []):
        where = f"budgets[{idx}]"
        try:
            cfg.budgets.append(
                RateBudget(
                    target=str(_require(entry, "target", where)),
                    max_probes_per_sec=float(entry.get("max_per_sec", 5.0)),
                    burst=int(entry.get("burst", 5)),
                )
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: {exc}") from None

    for idx, entry in enumerate(data.get("rules") or []):
        where = f"rules[{idx}]"
        try:
            cfg.rules.append(
                ThresholdRule(
                    rule_id=str(_require(entry, "id", where)),
                    selector=_parse_filter(entry.get("selector"), where),
                    metric=str(_require(entry, "metric", where)),
                    comparator=Comparator(str(_require(entry, "cmp", where))),
                    value=float(_require(entry, "value", where)),
                    consecutive=int(entry.get("consecutive", 1)),
                    breach_severity=Severity.parse(entry.get("severity", "error")),
                )
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: {exc}") from None

    if "scenario" in data and data["scenario"] is not None:
        cfg.scenario = parse_scenario(data)

    if "topology" in data and data["topology"] is not None:
        cfg.topology = Topology.from_data(data["topology"])

    coll = data.get("collector") or {}
    try:
        cfg.collector = CollectorOptions(
            workers=int(coll.get("workers", 4)),
            tick_ms=int(coll.get("tick_ms", 250)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"collector: {exc}") from None
    if cfg.collector.workers < 1:
        raise ConfigError("collector.workers: must be >= 1")

    try:
        cfg.correlation_window_ms = int(data.get("correlation_window_ms", 30_000))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"correlation_window_ms: {exc}") from None
    return cfg


def parse_scenario(data: Mapping[str, Any]) -> SimScenario:
    sc = data.get("scenario")
    if not isinstance(sc, Mapping):
        raise ConfigError("scenario: must be a mapping")
    failures = []
    for idx, entry in enumerate(data.get("failures") or []):
        where = f"failures[{idx}]"
        failures.append(
            Failure(
                component=str(_require(entry, "component", where)),
                down_at_ms=int(_require(entry, "down_at_ms", where)),
                up_at_ms=int(_require(entry, "up_at_ms", where)),
            )
        )
    where = "scenario"
    try:
        workers = sc.get("workers")
        return SimScenario(
            seed=int(_require(sc, "seed", where)),
            hosts=int(_require(sc, "hosts", where)),
            vms_per_host=int(_require(sc, "vms_per_host", where)),
            services_per_vm=int(_require(sc, "services_per_vm", where)),
            horizon_ms=int(_require(sc, "horizon_ms", where)),
            failures=tuple(failures),
            name=str(sc.get("name", "")),
            probe_period_ms=int(sc.get("probe_period_ms", 1000)),
            probe_deadline_ms=int(sc.get("probe_deadline_ms", min(500, int(sc.get("probe_period_ms", 1000))))),
            ping_latency_ms=float(sc.get("ping_latency_ms", 0.0)),
            metrics_latency_ms=float(sc.get("metrics_latency_ms", 0.0)),
            workers=None if workers is None else int(workers),
            expect_missed=sc.get("expect_missed"),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _load_yaml(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None


def load_config(path: str) -> AppConfig:
    return parse_config(_load_yaml(path))


def load_scenario(path: str) -> SimScenario:
    data = _load_yaml(path)
    if not isinstance(data, Mapping) or "scenario" not in data:
        raise ConfigError(f"{path}: no scenario section")
    return parse_scenario(data)


def load_tokens(path: str) -> list[TokenEntry]:
    data = _load_yaml(path)
    entries = data.get("tokens") if isinstance(data, Mapping) else data
    if not isinstance(entries, list):
        raise ConfigError("token file must hold a tokens list")
    out = []
    for idx, entry in enumerate(entries):
        where = f"tokens[{idx}]"
        try:
            roles = frozenset(Role(r) for r in _require(entry, "roles", where))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        out.append(
            TokenEntry(
                token=str(_require(entry, "token", where)),
                roles=roles,
                label=str(entry.get("label", "")),
            )
        )
    return out
