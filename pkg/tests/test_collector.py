from __future__ import annotations

import random
import time

import pytest

from cloudbus.clock import SimulatedClock, SystemClock
from cloudbus.collector import (
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
from cloudbus.errors import (
    DuplicateDriver,
    UnauthorizedProbe,
    UnknownDriver,
    ValidationError,
)
from cloudbus.events import ComponentKind

from conftest import component


def driver_with_latency(latency_ms: float, outcome: Outcome = Outcome.UP):
    def fn(target, params, credential):
        return DriverResult(outcome=outcome, metrics={"up": 1.0}, latency_ms=latency_ms)

    return fn


def make_collector(latency_ms=0.0, budgets=(), credentials=None, clock=None):
    registry = DriverRegistry()
    registry.register("stub", driver_with_latency(latency_ms))
    clock = clock if clock is not None else SimulatedClock(0)
    return Collector(registry, clock, credentials=credentials, budgets=budgets), clock


def spec(pid: str, period=1000, deadline=500, target=None, driver="stub", cred=None):
    return ProbeSpec(
        probe_id=pid,
        target=target if target is not None else component(f"t-{pid}"),
        driver=driver,
        period_ms=period,
        deadline_ms=deadline,
        credential_ref=cred,
    )


class TestSpecsAndRegistry:
    def test_deadline_longer_than_period_rejected(self):
        with pytest.raises(ValidationError):
            ProbeSpec("p", component("t"), "stub", period_ms=100, deadline_ms=200)

    def test_duplicate_driver(self):
        registry = DriverRegistry()
        registry.register("d", driver_with_latency(0))
        with pytest.raises(DuplicateDriver):
            registry.register("d", driver_with_latency(0))

    def test_unknown_driver_at_schedule_time(self):
        collector, _ = make_collector()
        with pytest.raises(UnknownDriver):
            collector.build_schedule([spec("p", driver="ghost")], now_ms=0)

    def test_duplicate_probe_id_rejected(self):
        collector, _ = make_collector()
        with pytest.raises(ValidationError):
            collector.build_schedule([spec("p"), spec("p")], now_ms=0)


class TestAuthorization:
    def test_kind_scope(self):
        cred = CredentialRecord("c", "sekrit", frozenset({"vm"}))
        assert authorize_probe(cred, component("vm-3", "vm")) is True

    def test_wrong_kind_scope(self):
        cred = CredentialRecord("c", "sekrit", frozenset({"physical_host"}))
        assert authorize_probe(cred, component("vm-3", "vm")) is False

    def test_explicit_id_scope(self):
        cred = CredentialRecord("c", "sekrit", frozenset({"vm-3"}))
        assert authorize_probe(cred, component("vm-3", "vm")) is True

    def test_unauthorized_probe_rejected_at_schedule(self):
        creds = {"c": CredentialRecord("c", "sekrit", frozenset({"physical_host"}))}
        collector, _ = make_collector(credentials=creds)
        with pytest.raises(UnauthorizedProbe):
            collector.build_schedule([spec("p", cred="c")], now_ms=0)

    def test_unknown_credential_rejected(self):
        collector, _ = make_collector()
        with pytest.raises(UnauthorizedProbe):
            collector.build_schedule([spec("p", cred="ghost")], now_ms=0)

    def test_secret_masked_in_repr(self):
        cred = CredentialRecord("c", "hunter2", frozenset({"vm"}))
        assert "hunter2" not in repr(cred)
        assert "***" in repr(cred)


class TestScheduleAndEdf:
    def test_tighter_deadline_dispatched_first(self):
        order = []
        registry = DriverRegistry()

        def recorder(target, params, credential):
            order.append(target.id)
            return DriverResult(Outcome.UP, {"up": 1.0}, latency_ms=10)

        registry.register("rec", recorder)
        collector = Collector(registry, SimulatedClock(0))
        specs = [
            ProbeSpec("slow", component("b"), "rec", period_ms=1000, deadline_ms=200),
            ProbeSpec("fast", component("a"), "rec", period_ms=1000, deadline_ms=50),
        ]
        schedule = collector.build_schedule(specs, now_ms=0)
        collector.run_cycle(schedule, workers=1, until_ms=0)
        assert order == ["a", "b"]

    def test_single_probe_firing_count_boundary_inclusive(self):
        # budget sized above the 10/s demand so only due-time enumeration matters
        budgets = [RateBudget(target="t-p", max_probes_per_sec=50.0, burst=50)]
        collector, _ = make_collector(budgets=budgets)
        schedule = collector.build_schedule([spec("p", period=100, deadline=100)], now_ms=0)
        raws, report = collector.run_cycle(schedule, workers=1, until_ms=1000)
        assert report.fired in (10, 11)
        assert report.fired == 11  # due times 0,100,...,1000 inclusive
        assert len(raws) == 11

    def test_probe_payload_shape(self):
        collector, _ = make_collector(latency_ms=5)
        schedule = collector.build_schedule([spec("p", target=component("vm-9", "vm"))], now_ms=0)
        raws, _ = collector.run_cycle(schedule, workers=1, until_ms=0)
        payload = raws[0].payload
        assert raws[0].source_kind == "probe.stub"
        assert payload["target"] == "vm-9"
        assert payload["kind"] == "vm"
        assert payload["outcome"] == "up"
        assert payload["latency_ms"] == 5.0
        assert payload["deadline_missed"] is False
        assert payload["up"] == 1.0


class TestDeadlines:
    def test_zero_latency_never_misses(self):
        collector, _ = make_collector(latency_ms=0)
        schedule = collector.build_schedule([spec("p", period=100, deadline=100)], now_ms=0)
        _, report = collector.run_cycle(schedule, workers=1, until_ms=1000)
        assert report.missed == 0

    def test_serial_overload_timeline_by_hand(self):
        # 10 probes due at t=0, 50 ms latency, 60 ms deadline, one worker.
        # Serial timeline: finishes at 50,100,...,500; only the first makes
        # the deadline -> 9 missed, worst lateness 500 - 60 = 440.
        collector, _ = make_collector(latency_ms=50)
        specs = [spec(f"p{i}", period=10_000, deadline=60) for i in range(10)]
        schedule = collector.build_schedule(specs, now_ms=0)
        raws, report = collector.run_cycle(schedule, workers=1, until_ms=0)
        assert report.fired == 10
        assert report.missed == 9
        assert report.worst_lateness_ms == 440
        missed_flags = [r.payload["deadline_missed"] for r in raws]
        assert missed_flags.count(True) == 9

    def test_parallel_pool_absorbs_wave(self):
        collector, _ = make_collector(latency_ms=50)
        specs = [spec(f"p{i}", period=10_000, deadline=60) for i in range(10)]
        schedule = collector.build_schedule(specs, now_ms=0)
        _, report = collector.run_cycle(schedule, workers=10, until_ms=0)
        assert report.missed == 0

    def test_workers_nine_still_misses(self):
        collector, _ = make_collector(latency_ms=50)
        specs = [spec(f"p{i}", period=10_000, deadline=60) for i in range(10)]
        schedule = collector.build_schedule(specs, now_ms=0)
        _, report = collector.run_cycle(schedule, workers=9, until_ms=0)
        assert report.missed == 1

    def test_overrun_skips_self_overlap(self):
        # latency 250 > period 100: firings at 0,300,600,900; releases at
        # 100,200,400,500,700,800,1000 skip as overruns
        collector, _ = make_collector(latency_ms=250)
        schedule = collector.build_schedule([spec("p", period=100, deadline=100)], now_ms=0)
        raws, report = collector.run_cycle(schedule, workers=4, until_ms=1000)
        assert report.fired == 4
        assert report.overruns == 7
        assert report.fired + report.suppressed + report.overruns == 11
        assert [r.received_at for r in raws] == [250, 550, 850, 1150]

    def test_driver_exception_becomes_probe_error(self):
        registry = DriverRegistry()

        def boom(target, params, credential):
            raise RuntimeError("driver exploded")

        registry.register("boom", boom)
        collector = Collector(registry, SimulatedClock(0))
        schedule = collector.build_schedule([spec("p", driver="boom")], now_ms=0)
        raws, report = collector.run_cycle(schedule, workers=1, until_ms=0)
        assert report.fired == 1
        assert raws[0].payload["outcome"] == "probe_error"
        assert "driver exploded" in raws[0].payload["error"]


class TestProbeResult:
    def test_missed_flag_must_match_timestamps(self):
        with pytest.raises(ValidationError):
            ProbeResult(
                probe_id="p",
                scheduled_due_at=0,
                started_at=0,
                finished_at=500,
                outcome=Outcome.UP,
                latency_ms=500,
                deadline_missed=False,
                deadline_ms=100,
            )

    def test_finished_before_started_rejected(self):
        with pytest.raises(ValidationError):
            ProbeResult(
                probe_id="p",
                scheduled_due_at=0,
                started_at=10,
                finished_at=5,
                outcome=Outcome.UP,
                latency_ms=0,
                deadline_missed=False,
                deadline_ms=100,
            )


class TestRequiredWorkers:
    def test_zero_latency(self):
        assert required_workers([spec("p")], 0) == 1

    def test_synchronized_wave_needs_full_parallelism(self):
        specs = [spec(f"p{i}", period=100, deadline=60) for i in range(10)]
        assert required_workers(specs, 50) == 10

    def test_low_utilization_single_worker(self):
        specs = [spec(f"p{i}", period=1000, deadline=500) for i in range(2)]
        assert required_workers(specs, 10) == 1

    def test_cross_checked_with_run_cycle(self):
        rng = random.Random(77)
        for _ in range(10):
            n = rng.randint(4, 10)
            period = rng.choice([500, 1000, 2000])
            latency = rng.randint(20, 150)
            specs = [
                spec(f"p{i:02d}", period=period, deadline=rng.randint(latency, period))
                for i in range(n)
            ]
            w = required_workers(specs, latency)
            collector, _ = make_collector(latency_ms=latency)
            schedule = collector.build_schedule(specs, now_ms=0)
            _, report = collector.run_cycle(schedule, workers=w, until_ms=4 * period)
            assert report.missed == 0, f"missed with w={w}"
            if w > 1:
                collector2, _ = make_collector(latency_ms=latency)
                schedule2 = collector2.build_schedule(specs, now_ms=0)
                _, report2 = collector2.run_cycle(schedule2, workers=w - 1, until_ms=4 * period)
                assert report2.missed > 0, f"no miss with w={w - 1}"


class TestRateBudget:
    def test_budget_validation(self):
        with pytest.raises(ValidationError):
            RateBudget(target="t", max_probes_per_sec=0)
        with pytest.raises(ValidationError):
            RateBudget(target="t", burst=0)

    def test_ten_second_window_bound(self):
        # 20 demanded probes/sec against the default 5/s budget over 30 s:
        # every 10 s window must stay within 5 * 10 * 1.05 = 52.5 firings
        target = component("hot")
        collector, _ = make_collector(latency_ms=0)
        schedule = collector.build_schedule(
            [spec("p", period=50, deadline=50, target=target)], now_ms=0
        )
        raws, report = collector.run_cycle(schedule, workers=1, until_ms=30_000)
        assert report.suppressed > 0
        fire_times = sorted(r.received_at for r in raws)
        limit = 5 * 10 * 1.05
        for offset in range(0, 20_001, 250):
            in_window = sum(1 for t in fire_times if offset <= t < offset + 10_000)
            assert in_window <= limit, f"window at {offset} fired {in_window}"
        assert report.fired + report.suppressed == 601  # releases 0..30000 step 50

    def test_suppressed_probes_counted_not_fired(self):
        target = component("hot")
        budgets = [RateBudget(target="hot", max_probes_per_sec=2.0, burst=2)]
        collector, _ = make_collector(budgets=budgets)
        schedule = collector.build_schedule(
            [spec("p", period=100, deadline=100, target=target)], now_ms=0
        )
        raws, report = collector.run_cycle(schedule, workers=1, until_ms=5_000)
        assert report.fired == len(raws)
        assert report.fired + report.suppressed == 51
        assert report.suppressed > 0


class TestLiveClock:
    def test_small_live_cycle(self):
        registry = DriverRegistry()

        def quick(target, params, credential):
            time.sleep(0.002)
            return DriverResult(Outcome.UP, {"up": 1.0}, latency_ms=None)

        registry.register("quick", quick)
        clock = SystemClock()
        collector = Collector(registry, clock)
        specs = [
            ProbeSpec(f"p{i}", component(f"t{i}"), "quick", period_ms=100, deadline_ms=90)
            for i in range(2)
        ]
        start = clock.now_ms()
        schedule = collector.build_schedule(specs, now_ms=start)
        raws, report = collector.run_cycle(schedule, workers=2, until_ms=start + 350)
        assert report.fired == len(raws)
        assert 4 <= report.fired <= 10
        assert report.missed == 0
        assert all(r.payload["latency_ms"] >= 1.0 for r in raws)
