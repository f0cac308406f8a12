"""Summary metrics over run logs: time/rounds to target, best accuracy,
speedup tables and plot series."""

from __future__ import annotations

import csv
import io
import statistics
from typing import Iterable, Mapping

import numpy as np

from .runlog import SCHEMA_VERSION, RunLog

FAILED = "failed"


def time_to_target(log: RunLog, target_accuracy: float) -> tuple[float, int] | None:
    """``(virtual_time, server_version)`` of the first record at or above target.

    ``None`` means the run never reached it.
    """
    for r in log.records:
        if r["accuracy"] >= target_accuracy:
            return r["time"], r["version"]
    return None


def best_accuracy(log: RunLog) -> float:
    if not log.records:
        raise ValueError("run log has no evaluation records")
    return max(r["accuracy"] for r in log.records)


def best_accuracy_within(log: RunLog, budget: float) -> float:
    """Best accuracy among records with ``time <= budget``."""
    accs = [r["accuracy"] for r in log.records if r["time"] <= budget]
    if not accs:
        raise ValueError(f"no evaluation records within time budget {budget}")
    return max(accs)


def late_window_std(log: RunLog, fraction: float = 0.5) -> float:
    """Std of accuracy over the last ``fraction`` of the run's virtual time."""
    if not log.records:
        raise ValueError("run log has no evaluation records")
    t_end = log.records[-1]["time"]
    cut = t_end * (1.0 - fraction)
    accs = [r["accuracy"] for r in log.records if r["time"] >= cut]
    return float(np.std(accs))


def _ratio(value: float, base: float) -> float:
    return value / base if base > 0 else float("inf") if value > 0 else 1.0


def speedup_table(logs: Mapping[str, RunLog], target: float) -> list[dict]:
    """One row per strategy with its time and rounds to ``target`` and the
    ratio to the best strategy. Failed strategies keep ``FAILED`` cells and do
    not contribute to the ratio base."""
    hits = {name: time_to_target(lg, target) for name, lg in logs.items()}
    ok = [h for h in hits.values() if h is not None]
    best_t = min((h[0] for h in ok), default=None)
    best_r = min((h[1] for h in ok), default=None)
    rows = []
    for name, hit in hits.items():
        if hit is None:
            rows.append({"strategy": name, "target": target, "time": FAILED, "rounds": FAILED,
                         "time_ratio": FAILED, "rounds_ratio": FAILED,
                         "best_accuracy": best_accuracy(logs[name])})
            continue
        t, r = hit
        rows.append({"strategy": name, "target": target, "time": t, "rounds": r,
                     "time_ratio": _ratio(t, best_t), "rounds_ratio": _ratio(r, best_r),
                     "best_accuracy": best_accuracy(logs[name])})
    return rows


def median_or_failed(values: Iterable) -> float | str:
    """Median with failures ranked as +inf; ``FAILED`` when the median is one."""
    nums = [float("inf") if v in (FAILED, None) else float(v) for v in values]
    if not nums:
        return FAILED
    med = float(np.median(nums))
    return FAILED if not np.isfinite(med) else med


def seed_aggregate(per_seed: Mapping[str, list[RunLog]], target: float) -> list[dict]:
    """Median time/rounds/best accuracy across seeds for each strategy."""
    rows = []
    for name, logs in per_seed.items():
        hits = [time_to_target(lg, target) for lg in logs]
        times = [h[0] if h else FAILED for h in hits]
        rounds = [h[1] if h else FAILED for h in hits]
        rows.append({
            "strategy": name,
            "target": target,
            "seeds": len(logs),
            "reached": sum(h is not None for h in hits),
            "time": median_or_failed(times),
            "rounds": median_or_failed(rounds),
            "best_accuracy": float(statistics.median(best_accuracy(lg) for lg in logs)),
        })
    ok_t = [r["time"] for r in rows if r["time"] != FAILED]
    ok_r = [r["rounds"] for r in rows if r["rounds"] != FAILED]
    for r in rows:
        r["time_ratio"] = FAILED if r["time"] == FAILED else _ratio(r["time"], min(ok_t))
        r["rounds_ratio"] = FAILED if r["rounds"] == FAILED else _ratio(r["rounds"], min(ok_r))
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def table_to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    if not rows:
        return f"# schema_version={SCHEMA_VERSION}\n"
    columns = columns or list(rows[0])
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def table_to_text(rows: list[dict], columns: list[str] | None = None) -> str:
    """Aligned plain-text table; value/ratio pairs render as ``1139(6.0x)``."""
    if not rows:
        return ""
    columns = columns or list(rows[0])
    cells = []
    for r in rows:
        line = []
        for c in columns:
            v = r.get(c, "")
            ratio = r.get(f"{c}_ratio")
            if c in ("time", "rounds") and ratio not in (None, FAILED) and v != FAILED:
                line.append(f"{_fmt(v)}({ratio:.1f}x)")
            else:
                line.append(_fmt(v))
        cells.append(line)
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    out = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    out.append("  ".join("-" * w for w in widths))
    out += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(out) + "\n"


def accuracy_series(log: RunLog, x: str = "time") -> list[tuple[float, float]]:
    """``(x, accuracy)`` pairs with ``x`` one of ``time`` or ``version``."""
    return [(r[x], r["accuracy"]) for r in log.records]


def staleness_histogram(log: RunLog) -> list[int]:
    return list(log.summary.get("staleness_histogram", []))
