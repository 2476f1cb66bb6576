"""Scenario report rendering: delimited tables plus matplotlib figures.

A report directory holds summary.txt, availability.csv, deadline.csv,
rca.json and two figures: availability.png (oracle vs measured per
component) and timeline.png (ground-truth down intervals).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .pipeline import SimRunResult


def summary_lines(result: SimRunResult) -> list[str]:
    sc = result.scenario
    rep = result.report
    lines = [
        f"scenario: {sc.name or 'unnamed'} (seed {sc.seed}, horizon {sc.horizon_ms} ms)",
        f"components: {len(result.availability)}  events: {result.event_count}  workers: {result.workers}",
        f"deadlines: fired={rep.fired} missed={rep.missed} suppressed={rep.suppressed} "
        f"overruns={rep.overruns} worst_lateness_ms={rep.worst_lateness_ms}",
        f"rca: roots={sorted(result.rca.roots)} suppressed={len(result.rca.suppressed)} "
        f"correlated_events={result.correlated_count} max_dedup_count={result.dedup_max_count}",
    ]
    for check in result.checks:
        lines.append(f"check {'PASS' if check.passed else 'FAIL'} {check.name}: {check.detail}")
    lines.append(f"result: {'PASS' if result.passed else 'FAIL'}")
    return lines


def write_report(result: SimRunResult, out_dir: str | Path) -> list[Path]:
    """Write the report files; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    summary = out / "summary.txt"
    summary.write_text("\n".join(summary_lines(result)) + "\n", encoding="utf-8")
    written.append(summary)

    avail = out / "availability.csv"
    with avail.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["component", "oracle_ratio", "measured_ratio", "delta", "tolerance", "transitions", "known_ms", "ok"]
        )
        for row in result.availability:
            writer.writerow(
                [
                    row.component,
                    f"{row.oracle_ratio:.6f}",
                    "" if row.measured_ratio is None else f"{row.measured_ratio:.6f}",
                    "" if row.delta is None else f"{row.delta:.6f}",
                    f"{row.tolerance:.6f}",
                    row.transitions,
                    row.known_ms,
                    int(row.ok),
                ]
            )
    written.append(avail)

    deadline = out / "deadline.csv"
    with deadline.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["window_start_ms", "window_end_ms", "fired", "missed", "suppressed", "overruns", "worst_lateness_ms"]
        )
        rep = result.report
        writer.writerow(
            [
                rep.window_start_ms,
                rep.window_end_ms,
                rep.fired,
                rep.missed,
                rep.suppressed,
                rep.overruns,
                rep.worst_lateness_ms,
            ]
        )
    written.append(deadline)

    rca_path = out / "rca.json"
    rca_path.write_text(
        json.dumps(
            {
                "window": {"start_ms": result.rca.window[0], "end_ms": result.rca.window[1]},
                "roots": sorted(result.rca.roots),
                "suppressed": dict(sorted(result.rca.suppressed.items())),
                "expected_roots": sorted(result.expected_roots),
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    written.append(rca_path)

    written.append(_availability_figure(result, out / "availability.png"))
    written.append(_timeline_figure(result, out / "timeline.png"))
    return written


def _availability_figure(result: SimRunResult, path: Path) -> Path:
    rows = result.availability
    names = [r.component for r in rows]
    oracle = [r.oracle_ratio for r in rows]
    measured = [r.measured_ratio if r.measured_ratio is not None else 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.35 * len(rows) + 1.5)))
    ypos = range(len(rows))
    ax.barh([y + 0.2 for y in ypos], oracle, height=0.4, label="oracle", color="#4878cf")
    ax.barh([y - 0.2 for y in ypos], measured, height=0.4, label="measured", color="#6acc65")
    ax.set_yticks(list(ypos))
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlim(0.0, 1.05)
    ax.set_xlabel("availability ratio")
    ax.set_title(f"Availability vs oracle ({result.scenario.name or 'scenario'})")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _timeline_figure(result: SimRunResult, path: Path) -> Path:
    comps = sorted(result.down_intervals)
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.3 * len(comps) + 1.5)))
    for idx, cid in enumerate(comps):
        spans = [(a, b - a) for a, b in result.down_intervals[cid]]
        ax.broken_barh([(0, result.scenario.horizon_ms)], (idx - 0.3, 0.6), facecolors="#d8e6d8")
        if spans:
            ax.broken_barh(spans, (idx - 0.3, 0.6), facecolors="#d65f5f")
    ax.set_yticks(range(len(comps)))
    ax.set_yticklabels(comps, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlim(0, result.scenario.horizon_ms)
    ax.set_xlabel("simulated time (ms)")
    ax.set_title("Ground-truth down intervals (red = down)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
