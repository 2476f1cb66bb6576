"""Acceptance criteria, one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion
summary including measured figures.
"""

from __future__ import annotations

import json
import random
import threading
import time
from collections import Counter

import pytest
import requests

from cloudbus.analytics import root_cause
from cloudbus.bus import MATCH_ALL, EventBus, EventFilter, Role
from cloudbus.clock import SimulatedClock
from cloudbus.collector import (
    Collector,
    CredentialRecord,
    DriverRegistry,
    DriverResult,
    Outcome,
    ProbeSpec,
    required_workers,
)
from cloudbus.errors import Timeout
from cloudbus.events import (
    ComponentId,
    ComponentKind,
    RawEvent,
    Severity,
    as_raw,
    decode_ndjson,
    encode_ndjson,
    make_event,
    normalize,
)
from cloudbus.gateway import GatewayServer
from cloudbus.pipeline import ManagementService, run_scenario
from cloudbus.sim import Failure, SimScenario, build, oracle_availability
from cloudbus.topology import EdgeKind, InventoryNode, Topology

from conftest import component


def report(name: str, detail: str) -> None:
    print(f"\nACCEPT PASS {name}: {detail}")


# -- 1. bus correctness under concurrency ---------------------------------------


class TestCriterion1BusCorrectness:
    PUBLISHERS = 8
    PER_PUBLISHER = 5_000

    def test_concurrent_publishers_gap_free_and_fold_consistent(self):
        t0 = time.monotonic()
        bus = EventBus()
        root = bus.root_token
        mediator = bus.mint_token(root, {Role.MEDIATOR}, "pub")
        consumer = bus.mint_token(root, {Role.CONSUMER}, "sub")
        total = self.PUBLISHERS * self.PER_PUBLISHER

        filters = [
            MATCH_ALL,
            EventFilter(min_severity=Severity.ERROR),
            EventFilter(class_glob="perf.*"),
        ]
        subs = [bus.subscribe(consumer, f, capacity=total) for f in filters]
        small = bus.subscribe(consumer, MATCH_ALL, capacity=64)

        rng = random.Random(1)
        classes = ["availability", "perf.cpu", "perf.mem"]
        batches = []
        for p in range(self.PUBLISHERS):
            batch = [
                make_event(
                    component(f"c-{rng.randint(1, 10)}"),
                    rng.choice(classes),
                    rng.choice(list(Severity)),
                    i,
                )
                for i in range(self.PER_PUBLISHER)
            ]
            batches.append(batch)

        logs: list[list[tuple[int, object]]] = [[] for _ in range(self.PUBLISHERS)]

        def publisher(k: int) -> None:
            log = logs[k]
            for ev in batches[k]:
                log.append((bus.publish(mediator, ev), ev))

        threads = [threading.Thread(target=publisher, args=(k,)) for k in range(self.PUBLISHERS)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        all_pairs = [pair for log in logs for pair in log]
        seqs = sorted(seq for seq, _ in all_pairs)
        assert seqs == list(range(1, total + 1)), "seq numbers must be 1..N gap-free"

        # snapshot equals the sequential left-fold over the publish log
        fold = {}
        for seq, ev in sorted(all_pairs):
            fold[(ev.component.id, ev.event_class)] = ev
        snap = bus.snapshot(consumer)
        assert snap.entries == fold

        # delivered union dropped equals the matching multiset per subscription
        for f, sub in zip(filters, subs):
            matching = Counter(ev.event_id for _, ev in all_pairs if f.matches(ev))
            delivered = Counter()
            seq_order = []
            while True:
                try:
                    seq, ev = sub.next_with_seq(0)
                except Timeout:
                    break
                delivered[ev.event_id] += 1
                seq_order.append(seq)
            assert seq_order == sorted(seq_order)
            assert delivered == matching
            assert sub.dropped_count == 0
        small_delivered = Counter()
        while True:
            try:
                small_delivered[small.next(0).event_id] += 1
            except Timeout:
                break
        assert len(small_delivered) + small.dropped_count == total
        assert all(small_delivered[eid] <= 1 for eid in small_delivered)

        elapsed = time.monotonic() - t0
        assert elapsed < 30.0
        report(
            "criterion-1 bus correctness",
            f"{self.PUBLISHERS}x{self.PER_PUBLISHER} events, gap-free seqs, "
            f"fold-consistent snapshot, delivered+dropped accounted, {elapsed:.2f}s",
        )


# -- 2. bus throughput ------------------------------------------------------------


class TestCriterion2Throughput:
    EVENTS = 30_000
    FLOOR_PER_SEC = 10_000

    def test_sustained_publish_deliver_rate(self):
        bus = EventBus()
        mediator = bus.mint_token(bus.root_token, {Role.MEDIATOR}, "pub")
        consumer = bus.mint_token(bus.root_token, {Role.CONSUMER}, "sub")
        sub = bus.subscribe(consumer, MATCH_ALL, capacity=self.EVENTS)
        events = [
            make_event(component(f"c-{i % 50}"), "perf.cpu", Severity.INFO, i)
            for i in range(self.EVENTS)
        ]
        received = []

        def drain() -> None:
            while len(received) < self.EVENTS:
                try:
                    received.append(sub.next(2000))
                except Timeout:
                    break

        consumer_thread = threading.Thread(target=drain)
        t0 = time.monotonic()
        consumer_thread.start()
        for ev in events:
            bus.publish(mediator, ev)
        consumer_thread.join(timeout=30)
        elapsed = time.monotonic() - t0

        assert len(received) == self.EVENTS
        assert sub.dropped_count == 0
        rate = self.EVENTS / elapsed
        assert rate >= self.FLOOR_PER_SEC, f"measured {rate:.0f} events/s"
        report(
            "criterion-2 bus throughput",
            f"publish->deliver of {self.EVENTS} events in {elapsed:.2f}s "
            f"= {rate:,.0f} events/s (budget {self.FLOOR_PER_SEC:,}/s)",
        )


# -- 3. RCA oracle equivalence ------------------------------------------------------


def bitmask_rca_oracle(n: int, edges: list[tuple[int, int]], down: set[int]):
    """Roots and nearest-down-ancestor map via bitmask closure and BFS layers."""
    adj = [0] * n  # adj[a] bit b set: edge a->b
    for a, b in edges:
        adj[a] |= 1 << b
    reach = list(adj)
    for k in range(n):
        mask_k = reach[k]
        bit_k = 1 << k
        for i in range(n):
            if reach[i] & bit_k:
                reach[i] |= mask_k
    down_mask = 0
    for d in down:
        down_mask |= 1 << d
    roots = {d for d in down if not any((reach[a] >> d) & 1 for a in down if a != d)}
    suppressed = {}
    for d in down - roots:
        # hop distance by expanding frontier masks from each candidate ancestor
        best = None
        for a in down:
            if a == d or not (reach[a] >> d) & 1:
                continue
            frontier = adj[a]
            hops = 1
            while not (frontier >> d) & 1:
                nxt = 0
                m = frontier
                while m:
                    low = m & -m
                    nxt |= adj[low.bit_length() - 1]
                    m ^= low
                frontier = nxt
                hops += 1
            key = (hops, f"n{a:02d}")
            if best is None or key < best:
                best = key
        suppressed[f"n{d:02d}"] = best[1]
    return {f"n{r:02d}" for r in roots}, suppressed


class TestCriterion3RcaOracle:
    CASES = 500

    def test_five_hundred_random_dags(self):
        t0 = time.monotonic()
        rng = random.Random(4242)
        for case in range(self.CASES):
            n = rng.randint(1, 15)
            p = rng.uniform(0.05, 0.5)
            edges = [(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < p]
            topo = Topology()
            for i in range(n):
                topo.upsert_node(InventoryNode(component(f"n{i:02d}", "service")))
            for a, b in edges:
                topo.link(f"n{a:02d}", f"n{b:02d}", EdgeKind.DEPENDS_ON)
            down = {i for i in range(n) if rng.random() < 0.45}
            want_roots, want_suppressed = bitmask_rca_oracle(n, edges, down)
            got = root_cause({f"n{i:02d}" for i in down}, topo, (0, 1))
            assert got.roots == frozenset(want_roots), f"case {case}: roots differ"
            assert dict(got.suppressed) == want_suppressed, f"case {case}: suppression differs"
        elapsed = time.monotonic() - t0
        assert elapsed < 10.0
        report(
            "criterion-3 rca oracle equivalence",
            f"{self.CASES}/{self.CASES} random DAGs match brute force exactly, {elapsed:.2f}s",
        )


# -- 4. deadline property --------------------------------------------------------------


class TestCriterion4Deadlines:
    SETS = 50

    @staticmethod
    def _random_specs(rng: random.Random):
        while True:
            n = rng.randint(4, 12)
            period = rng.choice([500, 1000, 2000, 3000])
            latency = rng.randint(30, 250)
            specs = [
                ProbeSpec(
                    probe_id=f"p{i:02d}",
                    target=component(f"t{i:02d}"),
                    driver="stub",
                    period_ms=period,
                    deadline_ms=rng.randint(latency, period),
                )
                for i in range(n)
            ]
            workers = required_workers(specs, latency)
            if workers >= 2:
                return specs, latency, period, workers

    @staticmethod
    def _run(specs, latency, period, workers) -> int:
        registry = DriverRegistry()
        registry.register(
            "stub",
            lambda target, params, cred: DriverResult(Outcome.UP, {"up": 1.0}, latency_ms=latency),
        )
        collector = Collector(registry, SimulatedClock(0))
        schedule = collector.build_schedule(specs, now_ms=0)
        _, rep = collector.run_cycle(schedule, workers=workers, until_ms=3 * period)
        return rep.missed

    def test_required_workers_is_exactly_sufficient(self):
        t0 = time.monotonic()
        rng = random.Random(777)
        for case in range(self.SETS):
            specs, latency, period, workers = self._random_specs(rng)
            missed_at_bound = self._run(specs, latency, period, workers)
            assert missed_at_bound == 0, f"case {case}: missed {missed_at_bound} at w={workers}"
            missed_below = self._run(specs, latency, period, workers - 1)
            assert missed_below > 0, f"case {case}: no miss at w={workers - 1}"
        elapsed = time.monotonic() - t0
        assert elapsed < 20.0
        report(
            "criterion-4 deadline property",
            f"{self.SETS} randomized spec sets: workers=W -> 0 missed, "
            f"W-1 -> missed observed, {elapsed:.2f}s",
        )


# -- 5. availability oracle ------------------------------------------------------------


class TestCriterion5Availability:
    SCENARIOS = 20

    def test_exact_oracle_example(self):
        scenario = SimScenario(
            seed=1, hosts=1, vms_per_host=1, services_per_vm=0,
            horizon_ms=1000, failures=(Failure("vm-1-1", 400, 700),),
        )
        infra = build(scenario)
        assert oracle_availability(infra.ground_truth, "vm-1-1", (0, 1000)) == pytest.approx(0.7)

    def test_pipeline_converges_to_oracle(self):
        rng = random.Random(2025)
        worst = 0.0
        for case in range(self.SCENARIOS):
            hosts = rng.randint(1, 2)
            vms = rng.randint(1, 2)
            svcs = rng.randint(0, 1)
            horizon = rng.choice([20_000, 40_000, 60_000])
            period = rng.choice([1_000, 2_000])
            skeleton = SimScenario(
                seed=case, hosts=hosts, vms_per_host=vms, services_per_vm=svcs, horizon_ms=horizon
            )
            ids = build(skeleton).component_ids()
            failures = []
            for _ in range(rng.randint(0, 2)):
                a = rng.randint(0, horizon - 3 * period)
                b = rng.randint(a + period, horizon)
                failures.append(Failure(rng.choice(ids), a, b))
            scenario = SimScenario(
                seed=case,
                hosts=hosts,
                vms_per_host=vms,
                services_per_vm=svcs,
                horizon_ms=horizon,
                probe_period_ms=period,
                probe_deadline_ms=period // 2,
                failures=tuple(failures),
            )
            result = run_scenario(scenario)
            for row in result.availability:
                assert row.measured_ratio is not None, f"case {case}: {row.component} unknown"
                assert row.delta <= row.tolerance, (
                    f"case {case}: {row.component} delta {row.delta:.6f} over "
                    f"tolerance {row.tolerance:.6f}"
                )
                worst = max(worst, row.delta)
        report(
            "criterion-5 availability oracle",
            f"{self.SCENARIOS} seeded scenarios within one probe period per "
            f"transition; worst ratio delta {worst:.6f}",
        )


# -- 6. end-to-end chain failure ---------------------------------------------------------


class TestCriterion6ChainFailure:
    def test_chain_failure_end_to_end(self):
        t0 = time.monotonic()
        scenario = SimScenario(
            seed=1,
            hosts=1,
            vms_per_host=2,
            services_per_vm=2,
            horizon_ms=300_000,
            probe_period_ms=5_000,
            probe_deadline_ms=2_500,
            failures=(Failure("host-1", 100_000, 200_000),),
            expect_missed=False,
            name="chain-failure",
        )
        result = run_scenario(scenario)
        assert result.passed, result.first_failure()
        assert result.rca.roots == frozenset({"host-1"}), "exactly one root: the host"
        descendants = {"vm-1-1", "vm-1-2", "svc-1-1-1", "svc-1-1-2", "svc-1-2-1", "svc-1-2-2"}
        assert set(result.rca.suppressed) == descendants

        service = result.service
        host_down_ids = {
            e.event_id
            for e in service.history
            if e.component.id == "host-1" and e.metrics.get("up") == 0.0
        }
        for cid in descendants:
            down_events = [
                e
                for e in service.history
                if e.component.id == cid
                and e.event_class == "availability"
                and e.metrics.get("up") == 0.0
            ]
            assert down_events, f"{cid} produced no down events"
            assert all(e.correlated_to in host_down_ids for e in down_events), (
                f"{cid} down events must point at the host's down event"
            )
        dedup_counts = [
            e.count
            for e in service.dedup.closed_events() + service.dedup.open_events()
            if e.event_class == "availability" and e.metrics.get("up") == 0.0
        ]
        assert dedup_counts and max(dedup_counts) > 1, "repeat down events must be counted"

        server = GatewayServer(("127.0.0.1", 0), service, heartbeat_ms=1000)
        server.serve_background()
        try:
            resp = requests.get(
                f"{server.url}/v1/rca",
                params={"start": 0, "end": scenario.horizon_ms},
                headers={"Authorization": f"Bearer {service.bus.root_token.token}"},
                timeout=10,
            )
            assert resp.status_code == 200
            obj = resp.json()
            assert set(obj["roots"]) == set(result.rca.roots)
            assert obj["suppressed"] == dict(result.rca.suppressed)
        finally:
            server.shutdown()
            server.server_close()
        elapsed = time.monotonic() - t0
        assert elapsed < 10.0
        report(
            "criterion-6 chain-failure end to end",
            f"root=host-1, {len(result.rca.suppressed)} suppressed, "
            f"max dedup count {result.dedup_max_count}, gateway parity, {elapsed:.2f}s wall",
        )


# -- 7. normalization and round-trip fuzz ----------------------------------------------------


class TestCriterion7Normalization:
    PAYLOADS = 10_000

    def test_fuzzed_payloads_normalize_roundtrip_idempotent(self):
        rng = random.Random(31337)
        outcomes = ["up", "down", "degraded", "probe_error"]
        kinds = ["vm", "service", "physical_host", "network_switch", "external"]
        count = 0
        for i in range(self.PAYLOADS):
            driver = rng.choice(["sim.ping", "sim.metrics", "net.ping", "agentless.metrics"])
            outcome = rng.choice(outcomes)
            payload = {
                "target": f"comp-{rng.randint(1, 99)}",
                "kind": rng.choice(kinds),
                "outcome": outcome,
                "latency_ms": round(rng.uniform(0, 50), 3),
                "deadline_missed": rng.random() < 0.05,
            }
            if outcome == "probe_error":
                payload["error"] = rng.choice(["timeout", "refused", "craqued pipe"])
            elif "ping" in driver:
                payload["up"] = outcome in ("up", "degraded")
            elif outcome == "up":
                payload["cpu_pct"] = round(rng.uniform(0, 100), 2)
                payload["mem_pct"] = round(rng.uniform(0, 100), 2)
            else:
                payload["up"] = 0.0
            raw = RawEvent(f"probe.{driver}", rng.randint(0, 10**10), payload)

            ev = normalize(raw)  # totality: no error permitted
            line = encode_ndjson(ev)
            assert decode_ndjson(line) == ev, "NDJSON round-trip must be identity"
            again = normalize(as_raw(ev))
            assert (
                again.occurred_at,
                again.component,
                again.event_class,
                again.severity,
                again.metrics,
                again.message,
                again.count,
            ) == (
                ev.occurred_at,
                ev.component,
                ev.event_class,
                ev.severity,
                ev.metrics,
                ev.message,
                ev.count,
            ), "normalization must be idempotent through the passthrough rule"
            count += 1
        report(
            "criterion-7 normalization fuzz",
            f"{count} driver payloads normalized, round-tripped and idempotent",
        )


# -- 8. security scan ---------------------------------------------------------------------


class TestCriterion8SecurityScan:
    SECRET = "sekrit-XYZZY-t0ken-9000"

    def test_no_secret_leaks_anywhere(self, caplog, tmp_path):
        caplog.set_level("DEBUG")
        secret = self.SECRET
        cred = CredentialRecord("edge-cred", secret, frozenset({"vm", "service"}))

        registry = DriverRegistry()

        def authenticated_ping(target, params, credential):
            assert credential is not None and credential.secret == secret
            return DriverResult(Outcome.UP, {"up": 1.0}, latency_ms=1.0)

        registry.register("auth.ping", authenticated_ping)
        clock = SimulatedClock(0)
        collector = Collector(registry, clock, credentials={"edge-cred": cred})
        topo = Topology()
        topo.upsert_node(InventoryNode(component("vm-1", "vm")))
        specs = [
            ProbeSpec(
                probe_id="p1",
                target=component("vm-1", "vm"),
                driver="auth.ping",
                period_ms=1000,
                deadline_ms=500,
                credential_ref="edge-cred",
            )
        ]
        schedule = collector.build_schedule(specs, now_ms=0)
        raws, rep = collector.run_cycle(schedule, workers=2, until_ms=10_000)
        assert rep.fired > 0

        service = ManagementService(topology=topo, clock=clock)
        for raw in raws:
            assert secret not in json.dumps(raw.payload), "raw payload leaked the secret"
            service.ingest_raw(raw)
        service.process_pending()

        artifacts: list[str] = []
        artifacts.extend(encode_ndjson(e) for e in service.history)
        artifacts.append(repr(cred))
        artifacts.append(str(cred))

        server = GatewayServer(("127.0.0.1", 0), service, heartbeat_ms=100)
        server.serve_background()
        try:
            headers = {"Authorization": f"Bearer {service.bus.root_token.token}"}
            for path, params in [
                ("/v1/status", {}),
                ("/v1/topology", {}),
                ("/v1/availability", {"component": "vm-1", "start": 0, "end": 10_000}),
                ("/v1/rca", {"start": 0, "end": 10_000}),
            ]:
                resp = requests.get(f"{server.url}{path}", params=params, headers=headers, timeout=10)
                artifacts.append(resp.text)
        finally:
            server.shutdown()
            server.server_close()

        # report files from a scenario run
        from cloudbus.report import write_report

        result = run_scenario(
            SimScenario(
                seed=2, hosts=1, vms_per_host=1, services_per_vm=1,
                horizon_ms=20_000, probe_period_ms=2_000, probe_deadline_ms=1_000,
                failures=(Failure("vm-1-1", 5_000, 10_000),),
            )
        )
        for path in write_report(result, tmp_path / "report"):
            data = path.read_bytes()
            assert secret.encode() not in data, f"secret leaked into {path.name}"

        artifacts.append(caplog.text)
        for i, text in enumerate(artifacts):
            assert secret not in text, f"secret leaked into artifact {i}"
        report(
            "criterion-8 security scan",
            f"{len(artifacts)} artifacts plus {rep.fired} probe events scanned, no secret substring",
        )
