"""Operator CLI: run the management server, push and tail events, query
status, availability and root cause, and run simulation scenarios end to end.

All client subcommands speak the gateway wire protocol; there is no
privileged back door. Machine-readable output is NDJSON under --json.
"""

from __future__ import annotations

import json
import logging
import signal
import sys
import threading
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import click
import requests
import yaml

from .bus import Role
from .collector import Collector, DriverRegistry, DriverResult, Outcome
from .config import AppConfig, load_config, load_scenario, load_tokens, parse_scenario
from .errors import CloudbusError, ConfigError
from .gateway import GatewayServer
from .pipeline import ManagementService, run_scenario
from .report import summary_lines, write_report
from .sim import SimScenario

log = logging.getLogger(__name__)

SERVER_OPT = dict(envvar="CLOUDBUS_SERVER", default="http://127.0.0.1:8787", show_default=True)
TOKEN_OPT = dict(envvar="CLOUDBUS_TOKEN", required=True)


def _iso(ms: int) -> str:
    return datetime.fromtimestamp(ms / 1000.0, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"


def _headers(token: str) -> dict[str, str]:
    return {"Authorization": f"Bearer {token}"}


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _request(method: str, url: str, **kwargs):
    try:
        return requests.request(method, url, timeout=kwargs.pop("timeout", 10), **kwargs)
    except requests.RequestException as exc:
        _fail(f"server unreachable: {exc}")


def _human_event_line(obj: dict) -> str:
    comp = obj.get("component", {})
    return (
        f"{_iso(int(obj.get('occurred_at', 0)))} {obj.get('severity', '?'):8s} "
        f"{comp.get('id', '?'):16s} {obj.get('class', '?'):18s} "
        f"count={obj.get('count', 1)} {obj.get('message', '')}"
    )


@click.group()
def main() -> None:
    """Cloud management and monitoring toolkit."""
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")


# -- server -----------------------------------------------------------------------


def _loopback_driver(target, params, credential) -> DriverResult:
    # trivial local echo measurement for live demos; latency is measured wall time
    payload = str(params.get("payload", "ping"))
    echoed = payload[:]
    return DriverResult(
        outcome=Outcome.UP if echoed == payload else Outcome.DEGRADED,
        metrics={"up": 1.0, "echo_bytes": float(len(echoed))},
        latency_ms=None,
    )


@main.command()
@click.option("--addr", envvar="GATEWAY_ADDR", default="127.0.0.1:8787", show_default=True, help="Bind address host:port.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="Config file (probes, credentials, budgets, rules, topology).")
@click.option("--token-file", envvar="TOKEN_FILE", type=click.Path(), default=None, help="Token file; tokens[] entries of {token, roles, label}.")
def serve(addr: str, config_path: str | None, token_file: str | None) -> None:
    """Run the management server until signaled."""
    try:
        cfg = load_config(config_path) if config_path else AppConfig()
    except (ConfigError, OSError) as exc:
        _fail(f"config: {exc}")
    try:
        host, _, port_s = addr.rpartition(":")
        host = host or "127.0.0.1"
        port = int(port_s)
    except ValueError:
        _fail(f"bad --addr {addr!r}, expected host:port")

    service = ManagementService(
        topology=cfg.topology,
        rules=cfg.rules,
        correlation_window_ms=cfg.correlation_window_ms,
    )
    root = service.bus.root_token
    if token_file:
        try:
            for entry in load_tokens(token_file):
                service.bus.install_token(root, entry.token, entry.roles, entry.label)
        except (ConfigError, CloudbusError, OSError) as exc:
            _fail(f"token file: {exc}")
    else:
        operator = service.bus.mint_token(root, {Role.ADMIN, Role.MEDIATOR, Role.CONSUMER}, "operator")
        click.echo(f"operator token: {operator.token}")

    stop = threading.Event()
    collector_thread = None
    if cfg.probes:
        registry = DriverRegistry()
        registry.register("loopback.echo", _loopback_driver)
        collector = Collector(registry, service.clock, cfg.credentials, cfg.budgets)
        try:
            schedule = collector.build_schedule(cfg.probes)
        except CloudbusError as exc:
            _fail(f"probes: {exc}")

        def collect_loop() -> None:
            while not stop.is_set():
                until = service.clock.now_ms() + cfg.collector.tick_ms
                try:
                    collector.run_cycle(
                        schedule, cfg.collector.workers, until,
                        on_event=lambda raw: service.ingest_raw(raw),
                    )
                except Exception:
                    log.exception("collector cycle failed")

        collector_thread = threading.Thread(target=collect_loop, name="cloudbus-collector", daemon=True)

    try:
        server = GatewayServer((host, port), service)
    except OSError as exc:
        _fail(f"cannot bind {addr}: {exc}")

    service.start_worker()
    if collector_thread is not None:
        collector_thread.start()

    def shutdown(signum, frame) -> None:
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGINT, shutdown)
    signal.signal(signal.SIGTERM, shutdown)
    bound_host, bound_port = server.server_address[:2]
    click.echo(f"cloudbus management server ready on http://{bound_host}:{bound_port}")
    sys.stdout.flush()
    try:
        server.serve_forever()
    finally:
        stop.set()
        service.stop_worker()
        server.server_close()


# -- event ingestion and tailing ------------------------------------------------------


@main.command()
@click.option("--server", **SERVER_OPT)
@click.option("--token", **TOKEN_OPT)
def ingest(server: str, token: str) -> None:
    """POST NDJSON events from stdin; prints one seq_no per accepted line."""
    failures = 0
    for lineno, line in enumerate(sys.stdin, start=1):
        line = line.strip()
        if not line:
            continue
        resp = _request(
            "POST",
            f"{server}/v1/events",
            data=line.encode("utf-8"),
            headers={**_headers(token), "Content-Type": "application/x-ndjson"},
        )
        if resp.status_code == 200:
            click.echo(str(resp.json()["seq_no"]))
        else:
            failures += 1
            try:
                detail = resp.json().get("error", "")
            except ValueError:
                detail = resp.text
            click.echo(f"line {lineno}: {resp.status_code} {detail}", err=True)
    sys.exit(1 if failures else 0)


@main.command()
@click.option("--server", **SERVER_OPT)
@click.option("--token", **TOKEN_OPT)
@click.option("--class", "class_glob", default=None, help="Class glob filter, e.g. perf.* or availability.")
@click.option("--kind", default=None, help="Component kind filter (comma separated).")
@click.option("--min-severity", default=None, help="Minimum severity name.")
@click.option("--count", type=int, default=None, help="Exit after N events.")
@click.option("--json", "json_out", is_flag=True, help="Raw NDJSON output.")
def tail(server, token, class_glob, kind, min_severity, count, json_out) -> None:
    """Stream matching events as they are published."""
    params = {}
    if class_glob:
        params["class"] = class_glob
    if kind:
        params["kind"] = kind
    if min_severity:
        params["min_severity"] = min_severity
    try:
        resp = requests.get(
            f"{server}/v1/events/stream",
            params=params,
            headers=_headers(token),
            stream=True,
            timeout=(10, None),
        )
    except requests.RequestException as exc:
        _fail(f"server unreachable: {exc}")
    if resp.status_code != 200:
        _fail(f"stream rejected: {resp.status_code} {resp.text.strip()}")
    seen = 0
    try:
        for line in resp.iter_lines():
            line = line.decode("utf-8") if isinstance(line, bytes) else line
            if not line or line.startswith("#"):
                continue
            if json_out:
                click.echo(line)
            else:
                click.echo(_human_event_line(json.loads(line)))
            seen += 1
            if count is not None and seen >= count:
                break
    finally:
        resp.close()


# -- queries ----------------------------------------------------------------------


@main.command()
@click.option("--server", **SERVER_OPT)
@click.option("--token", **TOKEN_OPT)
@click.option("--class", "class_glob", default=None)
@click.option("--kind", default=None)
@click.option("--min-severity", default=None)
@click.option("--json", "json_out", is_flag=True)
def status(server, token, class_glob, kind, min_severity, json_out) -> None:
    """Current status: latest event per (component, class)."""
    params = {}
    if class_glob:
        params["class"] = class_glob
    if kind:
        params["kind"] = kind
    if min_severity:
        params["min_severity"] = min_severity
    resp = _request("GET", f"{server}/v1/status", params=params, headers=_headers(token))
    if resp.status_code != 200:
        _fail(f"status failed: {resp.status_code} {resp.text.strip()}")
    for line in resp.text.splitlines():
        if not line:
            continue
        click.echo(line if json_out else _human_event_line(json.loads(line)))


@main.command()
@click.option("--server", **SERVER_OPT)
@click.option("--token", **TOKEN_OPT)
@click.option("--component", required=True)
@click.option("--start", type=int, required=True, help="Window start, ms since epoch.")
@click.option("--end", type=int, required=True, help="Window end, ms since epoch.")
@click.option("--json", "json_out", is_flag=True)
def avail(server, token, component, start, end, json_out) -> None:
    """Availability ratio of a component over a window."""
    resp = _request(
        "GET",
        f"{server}/v1/availability",
        params={"component": component, "start": start, "end": end},
        headers=_headers(token),
    )
    if resp.status_code != 200:
        _fail(f"availability failed: {resp.status_code} {resp.text.strip()}")
    obj = resp.json()
    if json_out:
        click.echo(json.dumps(obj, sort_keys=True))
    else:
        ratio = obj["ratio"]
        shown = "unknown" if ratio is None else f"{ratio:.6f}"
        click.echo(
            f"{obj['component']}: ratio={shown} up_ms={obj['up_ms']} "
            f"known_ms={obj['known_ms']} window=[{obj['start_ms']},{obj['end_ms']})"
        )


@main.command()
@click.option("--server", **SERVER_OPT)
@click.option("--token", **TOKEN_OPT)
@click.option("--start", type=int, required=True)
@click.option("--end", type=int, required=True)
@click.option("--json", "json_out", is_flag=True)
def rca(server, token, start, end, json_out) -> None:
    """Root-cause analysis over a window."""
    resp = _request("GET", f"{server}/v1/rca", params={"start": start, "end": end}, headers=_headers(token))
    if resp.status_code != 200:
        _fail(f"rca failed: {resp.status_code} {resp.text.strip()}")
    obj = resp.json()
    if json_out:
        click.echo(json.dumps(obj, sort_keys=True))
    else:
        click.echo(f"roots: {', '.join(obj['roots']) or '(none)'}")
        for comp, anc in sorted(obj["suppressed"].items()):
            click.echo(f"suppressed: {comp} -> {anc}")


@main.command()
@click.option("--server", **SERVER_OPT)
@click.option("--token", **TOKEN_OPT)
@click.option("--roles", required=True, help="Comma separated: mediator,consumer,admin.")
@click.option("--label", default="")
@click.option("--json", "json_out", is_flag=True)
def token(server, token, roles, label, json_out) -> None:
    """Mint a new token (admin only)."""
    resp = _request(
        "POST",
        f"{server}/v1/tokens",
        json={"roles": [r.strip() for r in roles.split(",") if r.strip()], "label": label},
        headers=_headers(token),
    )
    if resp.status_code != 200:
        _fail(f"token mint failed: {resp.status_code} {resp.text.strip()}")
    obj = resp.json()
    if json_out:
        click.echo(json.dumps(obj, sort_keys=True))
    else:
        click.echo(obj["token"])


# -- simulation -------------------------------------------------------------------


def _resolve_scenario(ref: str) -> SimScenario:
    path = Path(ref)
    if path.exists():
        try:
            return load_scenario(str(path))
        except ConfigError as exc:
            _fail(f"scenario: {exc}")
    name = ref if ref.endswith(".yaml") else f"{ref}.yaml"
    bundled = resources.files("cloudbus").joinpath("scenarios").joinpath(name)
    if bundled.is_file():
        return parse_scenario(yaml.safe_load(bundled.read_text(encoding="utf-8")))
    raise click.UsageError(f"scenario file not found: {ref}")


@main.command("sim-run")
@click.option("--scenario", "scenario_ref", required=True, help="Scenario file or bundled name (chain-failure, overload).")
@click.option("--workers", type=int, default=None, help="Worker pool size; default sized from the spec set.")
@click.option("--report", "report_dir", type=click.Path(), default=None, help="Directory for report files and figures.")
@click.option("--json", "json_out", is_flag=True)
def sim_run(scenario_ref: str, workers: int | None, report_dir: str | None, json_out: bool) -> None:
    """Run a scenario through the full pipeline on the simulated clock."""
    scenario = _resolve_scenario(scenario_ref)
    try:
        result = run_scenario(scenario, workers=workers)
    except CloudbusError as exc:
        _fail(str(exc))
    if report_dir:
        for written in write_report(result, report_dir):
            click.echo(f"wrote {written}", err=True)
    if json_out:
        click.echo(
            json.dumps(
                {
                    "scenario": scenario.name,
                    "workers": result.workers,
                    "events": result.event_count,
                    "fired": result.report.fired,
                    "missed": result.report.missed,
                    "suppressed": result.report.suppressed,
                    "overruns": result.report.overruns,
                    "worst_lateness_ms": result.report.worst_lateness_ms,
                    "roots": sorted(result.rca.roots),
                    "correlated_events": result.correlated_count,
                    "max_dedup_count": result.dedup_max_count,
                    "checks": {c.name: c.passed for c in result.checks},
                    "passed": result.passed,
                },
                sort_keys=True,
            )
        )
    else:
        for line in summary_lines(result):
            click.echo(line)
    if not result.passed:
        failure = result.first_failure()
        click.echo(f"error: check failed: {failure.name}: {failure.detail}", err=True)
        sys.exit(1)
    sys.exit(0)


if __name__ == "__main__":
    main()
