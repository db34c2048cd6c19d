#!/usr/bin/env python
"""
Per-request, per-layer IO latency profiler.

Simulates the instrumented read path, carries the trace to a collector, attributes every request's latency to
layers, interrupts, preemption and device wait, and reports the results.

Settings come from a yaml file, given with --config or the environment variable RELAY_CONFIG_FILE, falling back to
the shipped config/default.yml. RELAY_SEED overrides --seed.

Example usage:
```bash
$ relay pipeline --preset seqread_hit --out run/
$ relay simulate --preset randread_miss --out trace.p2lt --truth truth.json
$ relay analyze trace.p2lt --out profiles.jsonl
$ relay report profiles.jsonl --out report/
```
"""
import argparse
import hashlib
import io
import json
import logging
import os
import platform
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from . import analyzer, configure_logger
from ._version import __version__
from .profile import ConfigError, LayerDescription, ProbeDepth, ProfileDescription, link, load_layers, load_profile
from .report import analyze_profiles, emit_report
from .simulator import PRESETS, GroundTruth, ScenarioError, preset, simulate
from .trace import InternError, RelayError, StringTable, TraceRecord, validate_stream
from .transport import (
    DEFAULT_BATCH_RECORDS,
    DEFAULT_RING_BYTES,
    Collector,
    TraceWriter,
    TransportError,
    WireFormatError,
    agent_run,
    make_rings,
    read_trace,
    write_trace,
)

ENV_VAR_FOR_CONFIG_FILE_PATH = "RELAY_CONFIG_FILE"
ENV_VAR_FOR_SEED = "RELAY_SEED"
SHIPPED_CONFIG = Path(__file__).resolve().parents[1] / "config" / "default.yml"

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_INPUT = 2
EXIT_IO = 3

DEFAULTS: Dict[str, Any] = {
    "log_level": "INFO",
    "log_path": None,
    "seed": 0,
    "depth": "L8",
    "window": 6000,
    "tail_threshold": 25_000,
    "ring_bytes": DEFAULT_RING_BYTES,
    "flush_period_ms": 100,
    "batch_records": DEFAULT_BATCH_RECORDS,
    "num_threads": 1,
    "listen": "127.0.0.1:7878",
    "profile": None,
    "layers": None,
    "bar_slice": [0, 200],
}


class InvariantError(RelayError):
    """An invariant check of the pipeline failed."""


def _get_config_path(config_arg: Optional[str]) -> Optional[Path]:
    """Get the config file, first either from given path or from env variable, else the shipped default."""
    if config_arg:
        config_file = Path(config_arg)
    elif os.environ.get(ENV_VAR_FOR_CONFIG_FILE_PATH):
        config_file = Path(os.environ[ENV_VAR_FOR_CONFIG_FILE_PATH])
    elif SHIPPED_CONFIG.is_file():
        return SHIPPED_CONFIG
    else:
        return None

    if not config_file.is_file():
        raise ConfigError(f"Config file not found: {config_file}")
    return config_file


def get_repeated_keys(text: str) -> List[Tuple[int, str]]:
    """
    Return top-level keys that appear more than once; yaml silently keeps the last one.
    Args:
        text: The yaml document
    Returns:
        (line number, line) of every repeated occurrence
    """
    first_seen: Dict[str, int] = {}
    repeated = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line or line[0] in " \t#-" or ":" not in line:
            continue
        key = line.split(":", 1)[0].strip()
        if key in first_seen:
            repeated.append((number, line))
        else:
            first_seen[key] = number
    return repeated


def load_settings(config_arg: Optional[str] = None) -> Dict[str, Any]:
    """Built-in defaults overlaid with the config file, if one is found."""
    settings = dict(DEFAULTS)
    path = _get_config_path(config_arg)
    if path is None:
        return settings
    text = path.read_text(encoding="utf-8")
    try:
        loaded = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"Invalid yaml in {path}: {exc}") from None
    if not isinstance(loaded, dict):
        raise ConfigError(f"Config file {path} must hold a mapping")
    unknown = sorted(set(loaded) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"Unknown config keys in {path}: {', '.join(unknown)}")
    settings.update({key: value for key, value in loaded.items() if value is not None})
    settings["_repeated"] = get_repeated_keys(text)
    settings["_path"] = str(path)
    return settings


def resolve_seed(flag: Optional[int], settings: Dict[str, Any]) -> int:
    env = os.environ.get(ENV_VAR_FOR_SEED)
    if env:
        try:
            return int(env, 0)
        except ValueError:
            raise ConfigError(f"{ENV_VAR_FOR_SEED}={env!r} is not an integer") from None
    if flag is not None:
        return flag
    return int(settings["seed"])


def apply_args(args: argparse.Namespace, settings: Dict[str, Any]) -> Dict[str, Any]:
    """Command-line flags override the config file."""
    for key in ("depth", "window", "tail_threshold", "num_threads", "listen", "profile", "layers", "log_level"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    settings["seed"] = resolve_seed(getattr(args, "seed", None), settings)
    settings["depth"] = ProbeDepth.parse(settings["depth"])
    return settings


def load_description(settings: Dict[str, Any]) -> Tuple[ProfileDescription, LayerDescription]:
    profile = load_profile(settings["profile"])
    return profile, link(profile, load_layers(settings["layers"]))


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as src:
        for chunk in iter(lambda: src.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    versions: Dict[str, str]
    seed: int
    preset: str
    depth: str
    files: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def create(cls, seed: int, preset_name: str, depth: ProbeDepth) -> "RunManifest":
        return cls({"relay": __version__, "python": platform.python_version()}, seed, preset_name, str(depth))

    def add(self, name: str, path: Path) -> None:
        self.files[name] = _sha256(path)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (InvariantError, analyzer.AttributionError)):
        return EXIT_INVARIANT
    if isinstance(exc, (TransportError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ConfigError, ScenarioError, WireFormatError, InternError, RelayError, ValueError)):
        return EXIT_INPUT
    return EXIT_INVARIANT


def report_failure(stage: str, exc: BaseException, outdir: Optional[Path] = None) -> int:
    """Logs the failure, writes failure.json into outdir when it exists and one json line to stderr."""
    code = exit_code_for(exc)
    record = {"status": "failed", "stage": stage, "error": f"{type(exc).__name__}: {exc}", "exit_code": code}
    logging.error(f"{stage} failed: {exc}")
    if outdir is not None and Path(outdir).is_dir():
        (Path(outdir) / "failure.json").write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    return code


class _Stage:
    """Names the pipeline stage that is running, for failure records."""

    def __init__(self):
        self.name = "setup"

    def __call__(self, name: str) -> "_Stage":
        self.name = name
        logging.info(f"Stage {name}")
        return self


def trace_bytes(records: Sequence[TraceRecord], table: StringTable, batch_records: int) -> bytes:
    buffer = io.BytesIO()
    with TraceWriter(buffer, table, batch_records) as writer:
        writer.write(records)
    return buffer.getvalue()


def stream_through_collector(
    records: Sequence[TraceRecord], table: StringTable, out: Path, settings: Dict[str, Any], endpoint: str
) -> None:
    """Runs a collector on ``endpoint`` in a thread and replays the records to it through an agent session."""
    collector = Collector(endpoint, out, settings["batch_records"], timeout=60.0)
    errors: List[BaseException] = []

    def serve():
        try:
            collector.serve()
        except BaseException as exc:  # re-raised on the main thread
            errors.append(exc)

    thread = threading.Thread(target=serve, name="relay-collector", daemon=True)
    thread.start()
    stats = agent_run(
        collector.endpoint,
        make_rings(records, settings["ring_bytes"]),
        table,
        records,
        period=settings["flush_period_ms"] / 1000.0,
        batch_records=settings["batch_records"],
        block_on_full=True,
    )
    thread.join()
    if errors:
        raise errors[0]
    if not stats.balanced:
        raise InvariantError(f"Agent lost records: {stats}")
    logging.info(f"Streamed {stats.records_out} records, {stats.dropped} dropped, {stats.reconnects} reconnects")


def check_against_truth(analysis: analyzer.Analysis, truth: GroundTruth, full_depth: bool) -> None:
    """Raises InvariantError on the first profile that disagrees with the injected truth."""
    if analysis.incomplete:
        rid, reason = next(iter(analysis.incomplete.items()))
        raise InvariantError(f"{len(analysis.incomplete)} incomplete requests, first {rid}: {reason}")
    if len(analysis.profiles) != len(truth.requests):
        raise InvariantError(f"{len(analysis.profiles)} profiles for {len(truth.requests)} simulated requests")
    if analysis.discarded != 2 * truth.housekeeping_irqs:
        raise InvariantError(f"{analysis.discarded} discarded records, expected {2 * truth.housekeeping_irqs}")
    for profile in analysis.profiles:
        if not analyzer.check_conservation(profile):
            raise InvariantError(f"Request {profile.rid} does not conserve time: {profile.components()}")
        expected = truth.requests.get(profile.rid)
        if expected is None:
            raise InvariantError(f"Request {profile.rid} was never simulated")
        if full_depth:
            mismatch = analyzer.check_truth(profile, expected)
        else:
            mismatch = next(
                (
                    (name, got, want)
                    for name, got, want in (
                        ("total", profile.total, expected.total),
                        ("irq_ns", profile.irq_ns, expected.irq_ns),
                        ("sched_ns", profile.sched_ns, expected.sched_ns),
                        ("io_wait_ns", profile.io_wait_ns, expected.io_wait_ns),
                        ("layers", sum(profile.layers.values()), sum(expected.layers.values())),
                    )
                    if got != want
                ),
                None,
            )
        if mismatch:
            raise InvariantError(f"Request {profile.rid}: {mismatch[0]} is {mismatch[1]}, injected {mismatch[2]}")


@dataclass
class VerifyReport:
    requests: int = 0
    violations: int = 0
    incomplete: int = 0
    divergences: int = 0
    first_divergence: Optional[Dict[str, Any]] = None

    @property
    def ok(self) -> bool:
        return not (self.violations or self.divergences)


def verify_records(records: Sequence[TraceRecord], table: StringTable, ld: LayerDescription) -> VerifyReport:
    """Validates the stream and compares the stack walk with the segment-sweep oracle on every request."""
    report = VerifyReport()
    validation = validate_stream(records)
    report.violations = len(validation.errors)
    for violation in validation.errors[:10]:
        logging.warning(f"Record {violation.index}: {violation.code} {violation.message}")
    grouping = analyzer.group_by_rid(records)
    report.incomplete = len(grouping.incomplete)
    for group in grouping.groups:
        report.requests += 1
        try:
            got = analyzer.compute_request_profile(group.events, ld, table)
            want = analyzer.oracle_profile(group.events, ld, table)
        except analyzer.IncompleteRequestError:
            report.incomplete += 1
            continue
        difference = analyzer.compare_profiles(got, want)
        if difference is None and not analyzer.check_conservation(got):
            difference = ("conservation", got.component_sum(), got.total)
        if difference is not None:
            report.divergences += 1
            if report.first_divergence is None:
                bucket, analyzed, oracle = difference
                report.first_divergence = {"rid": group.rid, "bucket": bucket, "analyzer": analyzed, "oracle": oracle}
    return report


def cmd_simulate(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    profile, ld = load_description(settings)
    cfg = preset(args.preset).with_overrides(seed=settings["seed"], depth=settings["depth"])
    result = simulate(cfg, profile, ld)
    if args.truth:
        Path(args.truth).write_text(result.truth.to_json(), encoding="utf-8")
    if args.stream:
        stats = agent_run(
            args.stream,
            make_rings(result.records, settings["ring_bytes"]),
            result.table,
            result.records,
            period=settings["flush_period_ms"] / 1000.0,
            batch_records=settings["batch_records"],
        )
        logging.info(f"Agent stats: {stats}")
    if args.out:
        write_trace(args.out, result.records, result.table, settings["batch_records"])
    return EXIT_OK


def cmd_collect(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    collector = Collector(settings["listen"], args.out, settings["batch_records"], timeout=args.timeout)
    stats = collector.serve()
    logging.info(f"Collector stats: {stats}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    _, ld = load_description(settings)
    records, table = read_trace(args.trace)
    analysis = analyzer.analyze(records, ld, table, num_threads=settings["num_threads"])
    analyzer.write_profiles(args.out, analysis.profiles)
    broken = [p.rid for p in analysis.profiles if not analyzer.check_conservation(p)]
    if broken:
        raise InvariantError(f"{len(broken)} profiles do not conserve time, first {broken[0]}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    profiles = analyzer.read_profiles(args.profiles)
    analyses = analyze_profiles(
        profiles, settings["window"], settings["tail_threshold"], bar_slice=tuple(settings["bar_slice"])
    )
    emit_report(profiles, analyses, args.out)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    _, ld = load_description(settings)
    records, table = read_trace(args.trace)
    report = verify_records(records, table, ld)
    print(json.dumps(dict(asdict(report), ok=report.ok), sort_keys=True))
    if report.first_divergence:
        d = report.first_divergence
        logging.error(f"First divergence in request {d['rid']}: {d['bucket']} {d['analyzer']} != {d['oracle']}")
    return EXIT_OK if report.ok else EXIT_INVARIANT


def cmd_pipeline(args: argparse.Namespace, settings: Dict[str, Any], stage: _Stage) -> int:
    outdir = Path(args.out)
    (outdir / "failure.json").unlink(missing_ok=True)
    manifest = RunManifest.create(settings["seed"], args.preset, settings["depth"])

    stage("simulate")
    profile, ld = load_description(settings)
    cfg = preset(args.preset).with_overrides(seed=settings["seed"], depth=settings["depth"])
    result = simulate(cfg, profile, ld)
    validation = validate_stream(result.records)
    if not validation.ok:
        first = validation.errors[0]
        raise InvariantError(f"{len(validation.errors)} stream violations, first {first.code} at {first.index}")
    truth_path = outdir / "truth.json"
    truth_path.write_text(result.truth.to_json(), encoding="utf-8")

    stage("transport")
    trace_path = outdir / "trace.p2lt"
    if args.stream:
        stream_through_collector(result.records, result.table, trace_path, settings, args.listen or "127.0.0.1:0")
        offline = trace_bytes(result.records, result.table, settings["batch_records"])
        if trace_path.read_bytes() != offline:
            raise InvariantError("Collected trace differs from the offline trace")
    else:
        write_trace(trace_path, result.records, result.table, settings["batch_records"])

    stage("analyze")
    records, table = read_trace(trace_path)
    analysis = analyzer.analyze(records, ld, table, num_threads=settings["num_threads"])
    profiles_path = outdir / "profiles.jsonl"
    analyzer.write_profiles(profiles_path, analysis.profiles)
    check_against_truth(analysis, result.truth, full_depth=cfg.depth == ProbeDepth.L8)

    stage("report")
    analyses = analyze_profiles(
        analysis.profiles,
        settings["window"],
        settings["tail_threshold"],
        incomplete=analysis.incomplete_count,
        discarded=analysis.discarded,
        bar_slice=tuple(settings["bar_slice"]),
    )
    report_paths = emit_report(analysis.profiles, analyses, outdir / "report")

    stage("manifest")
    manifest.add("trace.p2lt", trace_path)
    manifest.add("truth.json", truth_path)
    manifest.add("profiles.jsonl", profiles_path)
    for name, path in sorted(report_paths.items()):
        manifest.add(f"report/{name}", path)
    manifest.write(outdir / "manifest.json")
    logging.info(f"Pipeline {args.preset} seed {settings['seed']} depth {settings['depth']} done in {outdir}")
    return EXIT_OK


def create_cli_parser() -> argparse.ArgumentParser:
    """Returns ArgumentParser for command line interface."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"path to yaml configuration file (or set {ENV_VAR_FOR_CONFIG_FILE_PATH})")
    common.add_argument("--log-level", dest="log_level", help="logging level, e.g. DEBUG or INFO")

    description = argparse.ArgumentParser(add_help=False)
    description.add_argument("--profile", help="profile script (*.p2l), the shipped read path by default")
    description.add_argument("--layers", help="layer description (*.layers), the shipped layers by default")

    scenario = argparse.ArgumentParser(add_help=False)
    scenario.add_argument("--preset", required=True, choices=sorted(PRESETS), help="scenario preset")
    scenario.add_argument("--seed", type=lambda text: int(text, 0), help=f"64-bit seed ({ENV_VAR_FOR_SEED} overrides)")
    scenario.add_argument("--depth", help="probe depth L1..L8")

    parser = argparse.ArgumentParser(prog="relay", description="Per-request, per-layer IO latency profiler.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate_parser = commands.add_parser(
        "simulate", parents=[common, description, scenario], help="run a scenario and write or stream its trace"
    )
    simulate_parser.add_argument("--out", help="trace file to write (*.p2lt)")
    simulate_parser.add_argument("--truth", help="ground truth json to write")
    simulate_parser.add_argument("--stream", metavar="HOST:PORT", help="ship the trace to a collector")

    collect_parser = commands.add_parser("collect", parents=[common], help="receive one agent session")
    collect_parser.add_argument("--listen", metavar="HOST:PORT", help="address to listen on")
    collect_parser.add_argument("--out", required=True, help="trace file to write (*.p2lt)")
    collect_parser.add_argument("--timeout", type=float, help="seconds to wait for an agent")

    analyze_parser = commands.add_parser("analyze", parents=[common, description], help="profile every request")
    analyze_parser.add_argument("trace", help="trace file (*.p2lt)")
    analyze_parser.add_argument("--out", required=True, help="request profiles to write (json lines)")
    analyze_parser.add_argument("--threads", dest="num_threads", type=int, help="worker threads")

    report_parser = commands.add_parser("report", parents=[common], help="write csv, json and svg reports")
    report_parser.add_argument("profiles", help="request profiles (json lines)")
    report_parser.add_argument("--out", required=True, help="report directory")
    report_parser.add_argument("--window", type=int, help="requests per window")
    report_parser.add_argument("--tail-threshold", dest="tail_threshold", type=int, help="tail threshold in ns")

    verify_parser = commands.add_parser(
        "verify", parents=[common, description], help="validate a trace and cross-check the analyzer with the oracle"
    )
    verify_parser.add_argument("trace", help="trace file (*.p2lt)")

    pipeline_parser = commands.add_parser(
        "pipeline", parents=[common, description, scenario], help="simulate, transport, analyze, check and report"
    )
    pipeline_parser.add_argument("--out", required=True, help="output directory")
    pipeline_parser.add_argument("--stream", action="store_true", help="route the trace through a loopback collector")
    pipeline_parser.add_argument("--listen", metavar="HOST:PORT", help="loopback collector address")
    pipeline_parser.add_argument("--window", type=int, help="requests per window")
    pipeline_parser.add_argument("--tail-threshold", dest="tail_threshold", type=int, help="tail threshold in ns")
    pipeline_parser.add_argument("--threads", dest="num_threads", type=int, help="worker threads")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "collect": cmd_collect,
    "analyze": cmd_analyze,
    "report": cmd_report,
    "verify": cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = create_cli_parser().parse_args(argv)
    stage = _Stage()
    outdir = Path(args.out) if args.command in ("pipeline", "report") else None
    start = time.time()
    try:
        if args.command == "pipeline":
            outdir.mkdir(parents=True, exist_ok=True)
        settings = apply_args(args, load_settings(args.config))
        configure_logger(settings["log_level"], Path(settings["log_path"]) if settings["log_path"] else None)
        for number, line in settings.get("_repeated", []):
            logging.warning(f"Config file - Repeated key on line {number}: {line.strip()}")
        stage(args.command)
        if args.command == "pipeline":
            code = cmd_pipeline(args, settings, stage)
        else:
            code = COMMANDS[args.command](args, settings)
    except (RelayError, OSError, ValueError) as exc:
        return report_failure(stage.name, exc, outdir)
    logging.info(f"{args.command} finished in {time.time() - start:.1f} s")
    return code


if __name__ == "__main__":
    sys.exit(main())
