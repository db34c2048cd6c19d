"""
Analyses over request profiles: latency and CPI series, windowed per-thread tail latency, interrupt fairness and
tail decomposition.
"""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .analyzer import IO_WAIT, IRQ, SCHED, RequestProfile, cpi_of
from .profile import ConfigError

DEFAULT_WINDOW = 6000
DEFAULT_TAIL_THRESHOLD = 25_000


def percentile(values: Sequence[int], q: float) -> int:
    """
    Nearest-rank percentile.

    Args:
        values: Non-empty collection of integers.
        q: Quantile in (0, 1].

    Returns:
        The ceil(q * n)-th smallest element, so the result is always one of the values.
    """
    if not 0 < q <= 1:
        raise ValueError(f"Quantile {q} outside (0, 1]")
    arr = np.asarray(values, dtype=np.int64)
    if arr.size == 0:
        raise ValueError("Percentile of an empty collection")
    rank = max(1, math.ceil(Fraction(str(q)) * arr.size))
    return int(np.partition(arr, rank - 1)[rank - 1])


def ordered(profiles: Iterable[RequestProfile]) -> List[RequestProfile]:
    """Profiles in request start order, cpu breaking ties."""
    return sorted(profiles, key=lambda p: (p.start, p.cpu))


def thread_labels(tids: Iterable[int]) -> Dict[int, str]:
    return {tid: f"T{i + 1}" for i, tid in enumerate(sorted(set(tids)))}


@dataclass
class WindowedSeries:
    window: int
    tids: List[int] = field(default_factory=list)
    windows: List[Dict[int, Tuple[int, int]]] = field(default_factory=list)

    def p99(self, window: int, tid: int) -> Optional[int]:
        """p99 of a thread in a 1-based window, None when the thread issued nothing there."""
        entry = self.windows[window - 1].get(tid)
        return entry[0] if entry else None

    def to_frame(self) -> pd.DataFrame:
        labels = thread_labels(self.tids)
        rows = [
            {"window": i + 1, "thread": labels[tid], "tid": tid, "p99_ns": p99, "count": count}
            for i, window in enumerate(self.windows)
            for tid, (p99, count) in sorted(window.items())
        ]
        return pd.DataFrame(rows, columns=["window", "thread", "tid", "p99_ns", "count"])


def windowed_p99(profiles: Sequence[RequestProfile], window: int = DEFAULT_WINDOW, q: float = 0.99) -> WindowedSeries:
    """
    Per-thread tail latency in consecutive windows of ``window`` requests.

    Args:
        profiles: Request profiles; they are put in start order first.
        window: Requests per window; the last window may be shorter.
        q: Quantile, 0.99 by default.

    Returns:
        ceil(n / window) windows, each mapping tid to (nearest-rank percentile of total latency, request count).
    """
    if window < 1:
        raise ConfigError("window must be at least 1")
    profiles = ordered(profiles)
    series = WindowedSeries(window, sorted({p.tid for p in profiles}))
    if not profiles:
        return series
    totals = np.fromiter((p.total for p in profiles), dtype=np.int64, count=len(profiles))
    tids = np.fromiter((p.tid for p in profiles), dtype=np.int64, count=len(profiles))
    for start in range(0, len(profiles), window):
        chunk_totals, chunk_tids = totals[start : start + window], tids[start : start + window]
        entry = {}
        for tid in series.tids:
            values = chunk_totals[chunk_tids == tid]
            if values.size:
                entry[tid] = (percentile(values, q), int(values.size))
        series.windows.append(entry)
    logging.info(f"Computed {len(series.windows)} windows of {window} requests for {len(series.tids)} threads")
    return series


class FairnessRow(NamedTuple):
    tid: int
    thread: str
    irq_count: int
    irq_ns: int


@dataclass
class FairnessTable:
    rows: List[FairnessRow] = field(default_factory=list)

    @property
    def irq_count(self) -> int:
        return sum(row.irq_count for row in self.rows)

    @property
    def irq_ns(self) -> int:
        return sum(row.irq_ns for row in self.rows)

    def row(self, tid: int) -> Optional[FairnessRow]:
        return next((row for row in self.rows if row.tid == tid), None)

    def to_dict(self) -> Dict:
        return {
            "threads": [row._asdict() for row in self.rows],
            "irq_count": self.irq_count,
            "irq_ns": self.irq_ns,
        }


def fairness_table(profiles: Sequence[RequestProfile]) -> FairnessTable:
    """Interrupts handled and time spent in them, per thread, in ascending tid order."""
    if not profiles:
        return FairnessTable()
    frame = pd.DataFrame(
        {
            "tid": [p.tid for p in profiles],
            "irq_count": [p.irq_count for p in profiles],
            "irq_ns": [p.irq_ns for p in profiles],
        }
    )
    sums = frame.groupby("tid", sort=True)[["irq_count", "irq_ns"]].sum()
    labels = thread_labels(int(tid) for tid in sums.index)
    return FairnessTable(
        [FairnessRow(int(tid), labels[int(tid)], int(row.irq_count), int(row.irq_ns)) for tid, row in sums.iterrows()]
    )


class TailEntry(NamedTuple):
    rid: int
    tid: int
    total: int
    layer: str
    ns: int
    share: float


def dominant_component(profile: RequestProfile) -> Tuple[str, int]:
    """Largest bucket: layers in description order, then irq, sched, io_wait; the earliest wins ties."""
    candidates = list(profile.layers.items()) + [
        (IRQ, profile.irq_ns),
        (SCHED, profile.sched_ns),
        (IO_WAIT, profile.io_wait_ns),
    ]
    best = candidates[0]
    for candidate in candidates[1:]:
        if candidate[1] > best[1]:
            best = candidate
    return best


def tail_decompose(profiles: Sequence[RequestProfile], threshold: int = DEFAULT_TAIL_THRESHOLD) -> List[TailEntry]:
    """
    Explains slow requests.

    Args:
        profiles: Request profiles.
        threshold: Requests whose total latency exceeds this many ns are tails.

    Returns:
        One entry per tail in start order, naming the dominant component and its share of the total.
    """
    if threshold <= 0:
        raise ConfigError("tail threshold must be positive")
    tails = []
    for p in ordered(profiles):
        if p.total > threshold:
            layer, ns = dominant_component(p)
            tails.append(TailEntry(p.rid, p.tid, p.total, layer, ns, round(ns / p.total, 4)))
    logging.info(f"{len(tails)} requests above {threshold} ns")
    return tails


def latency_cpi_series(profiles: Sequence[RequestProfile]) -> pd.DataFrame:
    """Per-request total latency and CPI in start order."""
    rows = [
        {"index": i, "rid": p.rid, "tid": p.tid, "start": p.start, "total_ns": p.total, "cpi": cpi_of(p)}
        for i, p in enumerate(ordered(profiles))
    ]
    return pd.DataFrame(rows, columns=["index", "rid", "tid", "start", "total_ns", "cpi"])


def layer_breakdown(profiles: Sequence[RequestProfile]) -> pd.DataFrame:
    """Per-request components (layers, irq, sched, io_wait, unattributed) in start order, one column each."""
    profiles = ordered(profiles)
    frame = pd.DataFrame([p.components() for p in profiles])
    frame.insert(0, "rid", [p.rid for p in profiles])
    return frame


def thread_summary(profiles: Sequence[RequestProfile]) -> List[Dict]:
    """Count, mean, p50, p99, max and interrupt share of total latency, per thread."""
    by_tid: Dict[int, List[RequestProfile]] = {}
    for p in profiles:
        by_tid.setdefault(p.tid, []).append(p)
    labels = thread_labels(by_tid)
    summary = []
    for tid in sorted(by_tid):
        totals = np.array([p.total for p in by_tid[tid]], dtype=np.int64)
        irq = sum(p.irq_ns for p in by_tid[tid])
        summary.append(
            {
                "tid": tid,
                "thread": labels[tid],
                "count": int(totals.size),
                "mean_ns": round(float(totals.mean()), 1),
                "p50_ns": percentile(totals, 0.5),
                "p99_ns": percentile(totals, 0.99),
                "max_ns": int(totals.max()),
                "irq_share": round(irq / int(totals.sum()), 4) if totals.sum() else 0.0,
            }
        )
    return summary
