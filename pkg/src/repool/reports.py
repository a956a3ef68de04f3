"""Deterministic report serialization and figure rendering.

Reports are JSON with sorted keys and repr-formatted floats, so identical
inputs and seeds produce byte-identical files. Every report carries a
provenance block (package version, seed, hash of the effective config).
Simulation runs additionally emit plot-ready CSVs and rendered PNG figures.
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .coalition import CoalitionReport

__all__ = [
    "canonical_json",
    "config_hash",
    "provenance",
    "write_json",
    "coalition_reports_csv",
    "write_simulation_outputs",
]


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def canonical_json(payload: dict) -> str:
    return json.dumps(_plain(payload), sort_keys=True, indent=2) + "\n"


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def provenance(config: dict, seed) -> dict:
    return {
        "version": __version__,
        "seed": seed,
        "config_sha256": config_hash(config),
    }


def write_json(payload: dict, path=None) -> str:
    """Serialize a report; write to ``path`` if given, return the text."""
    text = canonical_json(payload)
    if path is not None:
        Path(path).write_text(text)
    return text


def coalition_reports_csv(reports, path) -> None:
    """Serialize coalition reports (bitmask, allocated, standalone, slack, stderr)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subset", "allocated_total", "standalone_value", "slack", "stderr"])
        for r in reports:
            if not isinstance(r, CoalitionReport):
                raise TypeError(f"expected CoalitionReport, got {type(r).__name__}")
            writer.writerow([r.mask, repr(r.allocated), repr(r.standalone), repr(r.slack),
                             "" if r.stderr is None else repr(r.stderr)])


def _daily_member_rows(history, results) -> list[tuple]:
    """(day, case, rpp, average hourly payoff in that day) rows."""
    day_hours = defaultdict(list)
    for t, ts in enumerate(history.timestamps):
        day_hours[ts.date().isoformat()].append(t)
    rows = []
    for day in sorted(day_hours):
        hours = day_hours[day]
        for case_id in sorted(results):
            avg = results[case_id].payoffs[hours].mean(axis=0)
            rows.extend((day, case_id, i + 1, float(avg[i])) for i in range(avg.size))
    return rows


def _hourly_total_rows(history, results) -> list[tuple]:
    """(hour of day, case, average pool payoff at that hour) rows."""
    hod_hours = defaultdict(list)
    for t, ts in enumerate(history.timestamps):
        hod_hours[ts.hour].append(t)
    rows = []
    for hod in sorted(hod_hours):
        hours = hod_hours[hod]
        for case_id in sorted(results):
            rows.append((hod, case_id, float(results[case_id].per_hour_totals[hours].mean())))
    return rows


def _render_daily_member_figure(daily_rows, n_units: int, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cases = sorted({r[1] for r in daily_rows})
    # Across-days average per member and case.
    sums = {(c, i): [] for c in cases for i in range(1, n_units + 1)}
    for _, case_id, rpp, avg in daily_rows:
        sums[(case_id, rpp)].append(avg)
    width = 0.8 / len(cases)
    fig, ax = plt.subplots(figsize=(max(6.0, 0.9 * n_units), 4.0))
    xs = np.arange(1, n_units + 1)
    for k, case_id in enumerate(cases):
        heights = [np.mean(sums[(case_id, i)]) for i in xs]
        ax.bar(xs + (k - (len(cases) - 1) / 2) * width, heights, width, label=case_id)
    ax.set_xlabel("member")
    ax.set_ylabel("average hourly payoff ($)")
    ax.set_title("Average member payoffs by participation case")
    ax.set_xticks(xs)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _render_hourly_total_figure(hourly_rows, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cases = sorted({r[1] for r in hourly_rows})
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for case_id in cases:
        pts = [(hod, v) for hod, c, v in hourly_rows if c == case_id]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=case_id)
    ax.set_xlabel("hour of day")
    ax.set_ylabel("average pool payoff ($)")
    ax.set_title("Average pool payoff by hour of day")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_simulation_outputs(out_dir, history, results: dict, prov: dict) -> dict:
    """Write per-case JSON, a comparison summary, plot CSVs, and figures.

    Returns a mapping of logical names to file paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    for case_id, result in sorted(results.items()):
        payload = {
            "case_id": case_id,
            "grand_total": result.grand_total,
            "per_rpp_totals": result.per_rpp_totals,
            "per_hour_totals": result.per_hour_totals,
            "ne_condition_ok": result.ne_condition_ok,
            "clipped_hours": result.clipped_hours,
            "provenance": prov,
        }
        path = out / f"{case_id}.json"
        write_json(payload, path)
        paths[case_id] = path

    totals = {cid: results[cid].grand_total for cid in sorted(results)}
    summary = {
        "grand_totals": totals,
        "gaps": {
            "case2_minus_case3": totals.get("case2", 0.0) - totals.get("case3", 0.0),
            "case3_minus_case4": totals.get("case3", 0.0) - totals.get("case4", 0.0),
        },
        "n_hours": history.n_hours,
        "n_units": history.n_units,
        "provenance": prov,
    }
    paths["summary"] = out / "summary.json"
    write_json(summary, paths["summary"])

    paths["payoffs"] = out / "payoffs.csv"
    with open(paths["payoffs"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hour", "case", "rpp", "payoff"])
        for case_id in sorted(results):
            pay = results[case_id].payoffs
            for t in range(pay.shape[0]):
                for i in range(pay.shape[1]):
                    writer.writerow([t, case_id, i + 1, repr(float(pay[t, i]))])

    daily_rows = _daily_member_rows(history, results)
    paths["daily_member_avg"] = out / "daily_member_avg.csv"
    with open(paths["daily_member_avg"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "case", "rpp", "avg_payoff"])
        for day, case_id, rpp, avg in daily_rows:
            writer.writerow([day, case_id, rpp, repr(avg)])

    hourly_rows = _hourly_total_rows(history, results)
    paths["hourly_total_avg"] = out / "hourly_total_avg.csv"
    with open(paths["hourly_total_avg"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hour_of_day", "case", "avg_total_payoff"])
        for hod, case_id, avg in hourly_rows:
            writer.writerow([hod, case_id, repr(avg)])

    paths["daily_member_avg_png"] = out / "daily_member_avg.png"
    _render_daily_member_figure(daily_rows, history.n_units, paths["daily_member_avg_png"])
    paths["hourly_total_avg_png"] = out / "hourly_total_avg.png"
    _render_hourly_total_figure(hourly_rows, paths["hourly_total_avg_png"])
    return paths
