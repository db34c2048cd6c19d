"""Writes the analyses of a profile set as CSV, JSON and static SVG files."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .analyzer import RequestProfile  # noqa: E402
from .stats import (  # noqa: E402
    DEFAULT_TAIL_THRESHOLD,
    DEFAULT_WINDOW,
    FairnessTable,
    TailEntry,
    WindowedSeries,
    fairness_table,
    latency_cpi_series,
    layer_breakdown,
    tail_decompose,
    thread_summary,
    windowed_p99,
)

REPORT_FILES = (
    "series.csv",
    "windows.csv",
    "fairness.json",
    "tails.json",
    "summary.json",
    "layers.svg",
    "latency_cpi.svg",
    "windows.svg",
)
DEFAULT_BAR_SLICE = (0, 200)

# fixed salt and no date so identical inputs give identical SVG bytes
_SVG_RC = {"svg.hashsalt": "relay", "svg.fonttype": "none"}


@dataclass
class ReportAnalyses:
    series: pd.DataFrame
    windows: WindowedSeries
    fairness: FairnessTable
    tails: List[TailEntry]
    summary: Dict
    breakdown: pd.DataFrame
    tail_threshold: int = DEFAULT_TAIL_THRESHOLD
    bar_slice: Tuple[int, int] = DEFAULT_BAR_SLICE


def analyze_profiles(
    profiles: Sequence[RequestProfile],
    window: int = DEFAULT_WINDOW,
    tail_threshold: int = DEFAULT_TAIL_THRESHOLD,
    incomplete: int = 0,
    discarded: int = 0,
    bar_slice: Tuple[int, int] = DEFAULT_BAR_SLICE,
) -> ReportAnalyses:
    """Runs every analysis the report shows."""
    windows = windowed_p99(profiles, window)
    return ReportAnalyses(
        series=latency_cpi_series(profiles),
        windows=windows,
        fairness=fairness_table(profiles),
        tails=tail_decompose(profiles, tail_threshold),
        summary={
            "requests": len(profiles),
            "incomplete": incomplete,
            "discarded": discarded,
            "window": window,
            "windows": len(windows.windows),
            "tail_threshold": tail_threshold,
            "threads": thread_summary(profiles),
        },
        breakdown=layer_breakdown(profiles),
        tail_threshold=tail_threshold,
        bar_slice=tuple(bar_slice),
    )


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _save(fig, path: Path) -> None:
    with plt.rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _empty(ax, message: str = "no requests") -> None:
    ax.text(0.5, 0.5, message, ha="center", va="center", transform=ax.transAxes)


def plot_layers(breakdown: pd.DataFrame, bar_slice: Tuple[int, int], path: Path) -> None:
    """Stacked per-request component bars for a slice of requests."""
    start, count = bar_slice
    frame = breakdown.iloc[start : start + count]
    fig, ax = plt.subplots(figsize=(12, 5))
    components = [c for c in frame.columns if c != "rid" and frame[c].sum() > 0]
    if frame.empty or not components:
        _empty(ax)
    else:
        x = np.arange(start, start + len(frame))
        bottom = np.zeros(len(frame))
        colors = plt.get_cmap("tab20").colors
        for i, component in enumerate(components):
            values = frame[component].to_numpy(dtype=float) / 1000.0
            ax.bar(x, values, bottom=bottom, width=1.0, label=component, color=colors[i % len(colors)])
            bottom += values
        ax.legend(loc="upper right", ncol=min(len(components), 6), fontsize="small")
    ax.set_xlabel("request")
    ax.set_ylabel("latency (us)")
    ax.set_title("Per-layer breakdown of latency")
    fig.tight_layout()
    _save(fig, path)


def plot_latency_cpi(series: pd.DataFrame, path: Path) -> None:
    """Per-request latency (solid) with CPI (dotted) on a second axis."""
    fig, ax = plt.subplots(figsize=(12, 4))
    if series.empty:
        _empty(ax)
    else:
        ax.plot(series["index"], series["total_ns"], linewidth=0.8, color="tab:blue", label="latency")
        cpi_ax = ax.twinx()
        cpi_ax.plot(series["index"], series["cpi"].astype(float), linestyle=":", linewidth=0.8, color="tab:red")
        cpi_ax.set_ylabel("CPI")
    ax.set_xlabel("request")
    ax.set_ylabel("latency (ns)")
    ax.set_title("Per-request latency and CPI")
    fig.tight_layout()
    _save(fig, path)


def plot_windows(windows: WindowedSeries, path: Path) -> None:
    """Grouped per-thread p99 bars for every window."""
    fig, ax = plt.subplots(figsize=(12, 4))
    frame = windows.to_frame()
    if frame.empty:
        _empty(ax)
    else:
        threads = list(dict.fromkeys(frame["thread"]))
        width = 0.8 / len(threads)
        for i, thread in enumerate(threads):
            rows = frame[frame["thread"] == thread]
            ax.bar(rows["window"] + (i - (len(threads) - 1) / 2) * width, rows["p99_ns"], width=width, label=thread)
        ax.set_xticks(range(1, len(windows.windows) + 1))
        ax.legend(fontsize="small")
    ax.set_xlabel(f"window ({windows.window} requests)")
    ax.set_ylabel("p99 latency (ns)")
    ax.set_title("99th-percentile latency within each window")
    fig.tight_layout()
    _save(fig, path)


def emit_report(
    profiles: Sequence[RequestProfile], analyses: ReportAnalyses, outdir: Union[str, Path]
) -> Dict[str, Path]:
    """
    Writes every report file.

    Args:
        profiles: The profiles the analyses were computed from.
        analyses: Output of ``analyze_profiles``.
        outdir: Directory to write into; created when missing.

    Returns:
        File name to path of every file written.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {name: outdir / name for name in REPORT_FILES}

    analyses.series.to_csv(paths["series.csv"], index=False, float_format="%.3f")
    analyses.windows.to_frame().to_csv(paths["windows.csv"], index=False)
    _write_json(paths["fairness.json"], analyses.fairness.to_dict())
    _write_json(
        paths["tails.json"],
        {"threshold": analyses.tail_threshold, "tails": [tail._asdict() for tail in analyses.tails]},
    )
    _write_json(paths["summary.json"], analyses.summary)
    plot_layers(analyses.breakdown, analyses.bar_slice, paths["layers.svg"])
    plot_latency_cpi(analyses.series, paths["latency_cpi.svg"])
    plot_windows(analyses.windows, paths["windows.svg"])
    logging.info(f"Wrote report for {len(profiles)} requests to {outdir}")
    return paths
