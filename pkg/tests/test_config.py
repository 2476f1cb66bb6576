from __future__ import annotations

import pytest

from cloudbus.analytics import Comparator
from cloudbus.bus import Role
from cloudbus.config import load_config, load_scenario, load_tokens, parse_config
from cloudbus.errors import ConfigError
from cloudbus.events import ComponentKind, Severity

FULL = """\
credentials:
  - id: edge
    secret: topsecret
    scope: [vm, host-1]
probes:
  - id: ping-vm-1
    target: vm-1
    kind: vm
    driver: sim.ping
    period_ms: 1000
    deadline_ms: 500
    credential: edge
    params: {retries: 2}
budgets:
  - target: vm-1
    max_per_sec: 2.5
    burst: 3
rules:
  - id: cpu-high
    selector: {class: perf, kinds: [vm], min_severity: info}
    metric: cpu_pct
    cmp: gt
    value: 90
    consecutive: 3
    severity: critical
topology:
  nodes:
    - id: host-1
      kind: physical_host
    - id: vm-1
      kind: vm
      attrs: {host_id: host-1}
  edges:
    - {parent: host-1, child: vm-1, kind: hosts}
collector:
  workers: 8
  tick_ms: 100
correlation_window_ms: 10000
scenario:
  name: demo
  seed: 5
  hosts: 1
  vms_per_host: 1
  services_per_vm: 1
  horizon_ms: 10000
failures:
  - component: host-1
    down_at_ms: 100
    up_at_ms: 200
"""


class TestLoadConfig:
    def test_full_config(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text(FULL)
        cfg = load_config(str(path))
        assert cfg.credentials["edge"].scope == frozenset({"vm", "host-1"})
        probe = cfg.probes[0]
        assert probe.target.kind is ComponentKind.VM
        assert probe.credential_ref == "edge"
        assert probe.params == {"retries": 2}
        assert cfg.budgets[0].max_probes_per_sec == 2.5
        rule = cfg.rules[0]
        assert rule.comparator is Comparator.GT
        assert rule.breach_severity is Severity.CRITICAL
        assert rule.selector.class_glob == "perf"
        assert cfg.topology is not None and "vm-1" in cfg.topology
        assert cfg.collector.workers == 8
        assert cfg.correlation_window_ms == 10_000
        assert cfg.scenario is not None and cfg.scenario.failures[0].up_at_ms == 200

    def test_empty_config(self):
        cfg = parse_config({})
        assert cfg.probes == [] and cfg.scenario is None

    @pytest.mark.parametrize(
        "snippet,key",
        [
            ("probes:\n  - id: p\n", "probes[0]"),
            ("credentials:\n  - id: c\n", "credentials[0]"),
            ("budgets:\n  - burst: 1\n", "budgets[0]"),
            ("rules:\n  - id: r\n", "rules[0]"),
            ("failures:\n  - component: x\nscenario:\n  seed: 1\n", "failures[0]"),
            ("collector:\n  workers: 0\n", "collector.workers"),
        ],
    )
    def test_errors_name_the_offending_key(self, tmp_path, snippet, key):
        path = tmp_path / "bad.yaml"
        path.write_text(snippet)
        with pytest.raises(ConfigError) as err:
            load_config(str(path))
        assert key in str(err.value)

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "nope.yaml"
        path.write_text("probes: [unclosed")
        with pytest.raises(ConfigError):
            load_config(str(path))


class TestScenarioFile:
    def test_scenario_round_trip(self, tmp_path):
        path = tmp_path / "scenario.yaml"
        path.write_text(FULL)
        scenario = load_scenario(str(path))
        assert scenario.name == "demo"
        assert scenario.failures[0].component == "host-1"

    def test_missing_scenario_section(self, tmp_path):
        path = tmp_path / "bare.yaml"
        path.write_text("probes: []\n")
        with pytest.raises(ConfigError):
            load_scenario(str(path))


class TestTokenFile:
    def test_tokens_parse(self, tmp_path):
        path = tmp_path / "tokens.yaml"
        path.write_text(
            "tokens:\n  - token: abc\n    roles: [mediator, consumer]\n    label: ci\n"
        )
        entries = load_tokens(str(path))
        assert entries[0].token == "abc"
        assert entries[0].roles == frozenset({Role.MEDIATOR, Role.CONSUMER})

    def test_bad_role_named(self, tmp_path):
        path = tmp_path / "tokens.yaml"
        path.write_text("tokens:\n  - token: abc\n    roles: [overlord]\n")
        with pytest.raises(ConfigError) as err:
            load_tokens(str(path))
        assert "tokens[0]" in str(err.value)
