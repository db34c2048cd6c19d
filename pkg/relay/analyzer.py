"""
Per-request, per-layer latency attribution.

Records are grouped by request id, then each request is walked as a call stack: a frame's self time is its gross
time minus the gross time of its callees and minus the interference (interrupts, preemption, off-CPU windows) that
happened while it was on top. Off-CPU windows are split into io wait or scheduler time depending on whether a block
request was outstanding when the thread switched out. Cumulative hardware counters are differenced the same way,
so every layer gets its own cycles and instructions.

``oracle_profile`` computes the same profile by sweeping the elementary time segments between events; it shares no
code with the stack walk and is used to cross-check it.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

from .profile import LayerDescription
from .trace import EventKind, HwSample, RelayError, StringTable, TraceRecord
from .workers import run_threaded

UNATTRIBUTED = "unattributed"
IRQ = "irq"
SCHED = "sched"
IO_WAIT = "io_wait"


class IncompleteRequestError(RelayError):
    """A request lacks records (drops, truncation); it is excluded from statistics and counted."""


class AttributionError(RelayError):
    """Attribution produced impossible arithmetic, such as negative self time."""


def _delta(after: HwSample, before: HwSample) -> HwSample:
    return HwSample(after.cycles - before.cycles, after.instructions - before.instructions)


def _add(a: HwSample, b: HwSample) -> HwSample:
    return HwSample(a.cycles + b.cycles, a.instructions + b.instructions)


def _sub(a: HwSample, b: HwSample) -> HwSample:
    return HwSample(a.cycles - b.cycles, a.instructions - b.instructions)


@dataclass
class RequestProfile:
    rid: int
    pid: int
    tid: int
    cpu: int
    start: int
    end: int
    layers: Dict[str, int]
    irq_ns: int = 0
    irq_count: int = 0
    sched_ns: int = 0
    io_wait_ns: int = 0
    unattributed_ns: int = 0
    layer_hw: Dict[str, HwSample] = field(default_factory=dict)
    irq_hw: HwSample = HwSample()
    unattributed_hw: HwSample = HwSample()

    @property
    def total(self) -> int:
        return self.end - self.start

    @property
    def hw(self) -> HwSample:
        """On-cpu counters of the request: every layer, unattributed time and interrupt handling."""
        total = _add(self.irq_hw, self.unattributed_hw)
        for sample in self.layer_hw.values():
            total = _add(total, sample)
        return total

    def component_sum(self) -> int:
        return sum(self.layers.values()) + self.irq_ns + self.sched_ns + self.io_wait_ns + self.unattributed_ns

    def components(self) -> Dict[str, int]:
        """Every bucket of the request: layers in description order, then irq, sched, io_wait, unattributed."""
        return dict(
            self.layers,
            **{IRQ: self.irq_ns, SCHED: self.sched_ns, IO_WAIT: self.io_wait_ns, UNATTRIBUTED: self.unattributed_ns},
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["layer_hw"] = {layer: list(sample) for layer, sample in self.layer_hw.items()}
        data["irq_hw"] = list(self.irq_hw)
        data["unattributed_hw"] = list(self.unattributed_hw)
        data["total"] = self.total
        data["cpi"] = cpi_of(self)
        data["layer_cpi"] = {layer: cpi_of(self, layer) for layer in self.layers}
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RequestProfile":
        known = {f.name for f in fields(cls)}
        values = {key: value for key, value in data.items() if key in known}
        values["layer_hw"] = {layer: HwSample(*sample) for layer, sample in data.get("layer_hw", {}).items()}
        values["irq_hw"] = HwSample(*data.get("irq_hw", (0, 0)))
        values["unattributed_hw"] = HwSample(*data.get("unattributed_hw", (0, 0)))
        return cls(**values)


def cpi_of(profile: RequestProfile, scope: str = "request") -> Optional[float]:
    """
    Cycles per instruction of a request or of one of its layers.

    Args:
        profile: The request profile.
        scope: ``"request"``, ``"irq"`` or a layer name.

    Returns:
        Δcycles / Δinstructions rounded to 3 decimals, or None when no instruction retired in the scope.
    """
    if scope == "request":
        sample = profile.hw
    elif scope == IRQ:
        sample = profile.irq_hw
    else:
        sample = profile.layer_hw.get(scope, HwSample())
    if sample.instructions <= 0:
        return None
    return float(round(Fraction(sample.cycles, sample.instructions), 3))


@dataclass
class RequestEvents:
    rid: int
    pid: int
    tid: int
    cpu: int
    events: List[TraceRecord] = field(default_factory=list)
    closed: bool = False


@dataclass
class Grouping:
    groups: List[RequestEvents] = field(default_factory=list)
    incomplete: Dict[int, str] = field(default_factory=dict)
    discarded: int = 0


_ATTRIBUTED_BY_TID = {EventKind.IRQ_ENTER, EventKind.IRQ_EXIT, EventKind.SCHED_OUT, EventKind.SCHED_IN}


def group_by_rid(records: Iterable[TraceRecord]) -> Grouping:
    """
    Splits a stream into per-request event lists.

    Records are first put in (ts, cpu) order, keeping each cpu's own order, so the result does not depend on how
    cpus were interleaved in the input. Interrupt and scheduler records carry no request id; they join the request
    open on their thread, or are discarded and counted when the thread has none.

    Returns:
        A Grouping with complete requests ordered by rid, the incomplete ones with a reason, and the discard count.
    """
    grouping = Grouping()
    by_rid: Dict[int, RequestEvents] = {}
    open_by_tid: Dict[int, RequestEvents] = {}
    for rec in sorted(records, key=lambda r: (r.ts, r.cpu)):
        if rec.rid == 0:
            group = open_by_tid.get(rec.tid) if rec.tid and rec.kind in _ATTRIBUTED_BY_TID else None
            if group is None:
                grouping.discarded += 1
            else:
                group.events.append(rec)
            continue
        group = by_rid.get(rec.rid)
        if rec.kind == EventKind.SYSCALL_ENTER:
            if group is not None:
                grouping.incomplete[rec.rid] = "duplicate syscall entry"
                continue
            group = RequestEvents(rec.rid, rec.pid, rec.tid, rec.cpu, [rec])
            by_rid[rec.rid] = group
            open_by_tid[rec.tid] = group
            continue
        if group is None:
            grouping.incomplete.setdefault(rec.rid, "missing syscall entry")
            continue
        if group.closed:
            grouping.incomplete[rec.rid] = "record after syscall exit"
            continue
        group.events.append(rec)
        if rec.kind == EventKind.SYSCALL_EXIT:
            group.closed = True
            if open_by_tid.get(group.tid) is group:
                del open_by_tid[group.tid]

    for rid, group in by_rid.items():
        if not group.closed:
            grouping.incomplete.setdefault(rid, "missing syscall exit")
    grouping.groups = [by_rid[rid] for rid in sorted(by_rid) if rid not in grouping.incomplete]
    if grouping.incomplete:
        logging.warning(f"{len(grouping.incomplete)} incomplete requests excluded")
    logging.info(f"Grouped {len(grouping.groups)} requests, discarded {grouping.discarded} unattributable records")
    return grouping


class _Frame:
    __slots__ = ("func", "layer", "entry", "entry_hw", "child", "child_hw", "interference", "interference_hw")

    def __init__(self, func: int, layer: Optional[str], entry: int, entry_hw: HwSample):
        self.func = func
        self.layer = layer
        self.entry = entry
        self.entry_hw = entry_hw
        self.child = 0
        self.child_hw = HwSample()
        self.interference = 0
        self.interference_hw = HwSample()

    def self_time(self, ts: int, hw: HwSample) -> Tuple[int, HwSample, int, HwSample]:
        gross = ts - self.entry
        gross_hw = _delta(hw, self.entry_hw)
        return (
            gross - self.child - self.interference,
            _sub(_sub(gross_hw, self.child_hw), self.interference_hw),
            gross,
            gross_hw,
        )


class _Window:
    __slots__ = ("io", "start", "start_hw", "irq")

    def __init__(self, io: bool, start: int, start_hw: HwSample):
        self.io = io
        self.start = start
        self.start_hw = start_hw
        self.irq = 0


def _check_bounds(events: Sequence[TraceRecord]) -> None:
    if not events or events[0].kind != EventKind.SYSCALL_ENTER:
        raise IncompleteRequestError("request does not start with SYSCALL_ENTER")
    if events[-1].kind != EventKind.SYSCALL_EXIT or events[-1].rid != events[0].rid:
        raise IncompleteRequestError(f"request {events[0].rid} does not end with its SYSCALL_EXIT")


def _name_of(table: Optional[StringTable], func: int) -> str:
    name = table.lookup(func) if table is not None else None
    return name if name is not None else str(func)


def compute_request_profile(
    events: Sequence[TraceRecord], ld: LayerDescription, table: Optional[StringTable] = None
) -> RequestProfile:
    """
    Attributes one request's time to layers by walking its call stack.

    Args:
        events: The request's records in order, SYSCALL_ENTER first and SYSCALL_EXIT last.
        ld: Layer description mapping function names to layers.
        table: String table resolving FunctionIds to names (ids are used as names without one).

    Returns:
        The RequestProfile; the syscall's own self time is ``unattributed``.
    """
    _check_bounds(events)
    first, last = events[0], events[-1]
    profile = RequestProfile(
        first.rid, first.pid, first.tid, first.cpu, first.ts, last.ts, {layer: 0 for layer in ld.names()}
    )
    layer_hw = {layer: HwSample() for layer in ld.names()}
    layer_cache: Dict[int, Optional[str]] = {}
    stack = [_Frame(first.func, None, first.ts, first.hw)]
    irq_depth = 0
    irq_start, irq_start_hw = 0, HwSample()
    window: Optional[_Window] = None
    outstanding = 0

    for rec in events[1:-1]:
        kind = rec.kind
        if kind == EventKind.FUNC_ENTRY:
            if irq_depth or window is not None:
                raise AttributionError(f"request {first.rid}: function entry while off the thread's context")
            layer = layer_cache.get(rec.func)
            if rec.func not in layer_cache:
                layer = layer_cache[rec.func] = ld.layer_of(_name_of(table, rec.func))
            stack.append(_Frame(rec.func, layer, rec.ts, rec.hw))
        elif kind == EventKind.FUNC_EXIT:
            if len(stack) == 1 or stack[-1].func != rec.func:
                raise IncompleteRequestError(f"request {first.rid}: exit of {_name_of(table, rec.func)} unmatched")
            frame = stack.pop()
            self_ns, self_hw, gross, gross_hw = frame.self_time(rec.ts, rec.hw)
            if self_ns < 0:
                raise AttributionError(
                    f"request {first.rid}: negative self time {self_ns} in {_name_of(table, frame.func)}"
                )
            if frame.layer is None:
                profile.unattributed_ns += self_ns
                profile.unattributed_hw = _add(profile.unattributed_hw, self_hw)
            else:
                profile.layers[frame.layer] += self_ns
                layer_hw[frame.layer] = _add(layer_hw[frame.layer], self_hw)
            parent = stack[-1]
            parent.child += gross
            parent.child_hw = _add(parent.child_hw, gross_hw)
        elif kind == EventKind.IRQ_ENTER:
            irq_depth += 1
            profile.irq_count += 1
            if irq_depth == 1:
                irq_start, irq_start_hw = rec.ts, rec.hw
        elif kind == EventKind.IRQ_EXIT:
            if not irq_depth:
                raise IncompleteRequestError(f"request {first.rid}: interrupt exit without entry")
            irq_depth -= 1
            if irq_depth == 0:
                duration = rec.ts - irq_start
                duration_hw = _delta(rec.hw, irq_start_hw)
                profile.irq_ns += duration
                profile.irq_hw = _add(profile.irq_hw, duration_hw)
                if window is not None:
                    window.irq += duration
                else:
                    top = stack[-1]
                    top.interference += duration
                    top.interference_hw = _add(top.interference_hw, duration_hw)
        elif kind == EventKind.SCHED_OUT:
            if window is not None:
                raise IncompleteRequestError(f"request {first.rid}: switched out twice")
            window = _Window(outstanding > 0, rec.ts, rec.hw)
        elif kind == EventKind.SCHED_IN:
            if window is None:
                raise IncompleteRequestError(f"request {first.rid}: switched in while running")
            duration = rec.ts - window.start
            if window.io:
                profile.io_wait_ns += duration - window.irq
            else:
                profile.sched_ns += duration - window.irq
            top = stack[-1]
            top.interference += duration
            top.interference_hw = _add(top.interference_hw, _delta(rec.hw, window.start_hw))
            window = None
        elif kind == EventKind.OFFCPU_SUBMIT:
            outstanding += 1
        elif kind == EventKind.OFFCPU_COMPLETE:
            outstanding = max(0, outstanding - 1)
        else:
            raise IncompleteRequestError(f"request {first.rid}: unexpected {kind.name} inside the request")

    if len(stack) > 1 or irq_depth or window is not None:
        raise IncompleteRequestError(f"request {first.rid}: frames, interrupts or windows open at syscall exit")
    self_ns, self_hw, _, _ = stack[0].self_time(last.ts, last.hw)
    if self_ns < 0:
        raise AttributionError(f"request {first.rid}: negative unattributed time {self_ns}")
    profile.unattributed_ns += self_ns
    profile.unattributed_hw = _add(profile.unattributed_hw, self_hw)
    profile.layer_hw = layer_hw
    return profile


class Segment(NamedTuple):
    start: int
    end: int
    bucket: str
    hw: HwSample


def sweep_segments(
    events: Sequence[TraceRecord], ld: LayerDescription, table: Optional[StringTable] = None
) -> List[Segment]:
    """
    Cuts a request at every event timestamp and labels each piece.

    A piece belongs to irq while an interrupt is open, else to the open off-CPU window (io_wait or sched), else to
    the layer of the innermost open function, else to unattributed.
    """
    _check_bounds(events)
    segments = []
    functions: List[Optional[str]] = []
    interrupts = 0
    window: Optional[str] = None
    submitted = 0
    for rec, following in zip(events, events[1:]):
        kind = rec.kind
        if kind == EventKind.FUNC_ENTRY:
            functions.append(ld.layer_of(_name_of(table, rec.func)))
        elif kind == EventKind.FUNC_EXIT:
            if not functions:
                raise IncompleteRequestError(f"request {events[0].rid}: exit without an open function")
            functions.pop()
        elif kind == EventKind.IRQ_ENTER:
            interrupts += 1
        elif kind == EventKind.IRQ_EXIT:
            interrupts -= 1
        elif kind == EventKind.SCHED_OUT:
            window = IO_WAIT if submitted else SCHED
        elif kind == EventKind.SCHED_IN:
            window = None
        elif kind == EventKind.OFFCPU_SUBMIT:
            submitted += 1
        elif kind == EventKind.OFFCPU_COMPLETE:
            submitted = max(0, submitted - 1)

        if following.ts < rec.ts:
            raise AttributionError(f"request {events[0].rid}: time runs backwards at {following.ts}")
        if interrupts > 0:
            bucket = IRQ
        elif window is not None:
            bucket = window
        elif functions and functions[-1] is not None:
            bucket = functions[-1]
        else:
            bucket = UNATTRIBUTED
        segments.append(Segment(rec.ts, following.ts, bucket, _delta(following.hw, rec.hw)))
    return segments


def oracle_profile(
    events: Sequence[TraceRecord], ld: LayerDescription, table: Optional[StringTable] = None
) -> RequestProfile:
    """Brute-force profile: sums the labelled segments of ``sweep_segments``."""
    first, last = events[0], events[-1]
    layers = {layer: 0 for layer in ld.names()}
    layer_hw = {layer: HwSample() for layer in ld.names()}
    sums = {IRQ: 0, SCHED: 0, IO_WAIT: 0, UNATTRIBUTED: 0}
    irq_hw = unattributed_hw = HwSample()
    for segment in sweep_segments(events, ld, table):
        length = segment.end - segment.start
        if segment.bucket in layers:
            layers[segment.bucket] += length
            layer_hw[segment.bucket] = _add(layer_hw[segment.bucket], segment.hw)
        else:
            sums[segment.bucket] += length
            if segment.bucket == IRQ:
                irq_hw = _add(irq_hw, segment.hw)
            elif segment.bucket == UNATTRIBUTED:
                unattributed_hw = _add(unattributed_hw, segment.hw)
    return RequestProfile(
        rid=first.rid,
        pid=first.pid,
        tid=first.tid,
        cpu=first.cpu,
        start=first.ts,
        end=last.ts,
        layers=layers,
        irq_ns=sums[IRQ],
        irq_count=sum(1 for rec in events if rec.kind == EventKind.IRQ_ENTER),
        sched_ns=sums[SCHED],
        io_wait_ns=sums[IO_WAIT],
        unattributed_ns=sums[UNATTRIBUTED],
        layer_hw=layer_hw,
        irq_hw=irq_hw,
        unattributed_hw=unattributed_hw,
    )


def compare_profiles(a: RequestProfile, b: RequestProfile) -> Optional[Tuple[str, Any, Any]]:
    """Returns the first differing (field, a value, b value), looking inside layer maps, or None."""
    for f in fields(RequestProfile):
        left, right = getattr(a, f.name), getattr(b, f.name)
        if isinstance(left, dict) and isinstance(right, dict):
            for key in list(left) + [key for key in right if key not in left]:
                if left.get(key) != right.get(key):
                    return f"{f.name}.{key}", left.get(key), right.get(key)
        elif left != right:
            return f.name, left, right
    return None


def check_conservation(profile: RequestProfile) -> bool:
    """total = Σ layers + irq + sched + io_wait + unattributed, with every component non-negative."""
    components = profile.components().values()
    return profile.component_sum() == profile.total and all(value >= 0 for value in components)


def check_truth(profile: RequestProfile, truth) -> Optional[Tuple[str, Any, Any]]:
    """Compares a profile against a simulator RequestTruth; returns the first mismatch or None."""
    expected = {
        "total": truth.total,
        "tid": truth.tid,
        "irq_ns": truth.irq_ns,
        "irq_count": truth.irq_count,
        "sched_ns": truth.sched_ns,
        "io_wait_ns": truth.io_wait_ns,
        "unattributed_ns": 0,
    }
    for layer, value in truth.layers.items():
        if profile.layers.get(layer) != value:
            return f"layers.{layer}", profile.layers.get(layer), value
    for name, value in expected.items():
        if getattr(profile, name) != value:
            return name, getattr(profile, name), value
    return None


@dataclass
class Analysis:
    profiles: List[RequestProfile] = field(default_factory=list)
    incomplete: Dict[int, str] = field(default_factory=dict)
    discarded: int = 0

    @property
    def incomplete_count(self) -> int:
        return len(self.incomplete)


def profile_requests(
    grouping: Grouping,
    ld: LayerDescription,
    table: Optional[StringTable] = None,
    num_threads: int = 1,
    batch_size: int = 10000,
    profiler: Optional[Callable[..., RequestProfile]] = None,
) -> Analysis:
    """
    Profiles every complete group on the worker pool.

    Args:
        grouping: Output of ``group_by_rid``.
        ld: Layer description.
        table: String table of the trace.
        num_threads: Worker threads.
        batch_size: Groups handed to one worker at a time.
        profiler: Per-request function, ``compute_request_profile`` unless given.

    Returns:
        Profiles in rid order; structurally incomplete requests are listed with a reason instead.
    """
    profiler = profiler or compute_request_profile

    def work(groups: List[RequestEvents]) -> List[Union[RequestProfile, Tuple[int, str]]]:
        results: List[Union[RequestProfile, Tuple[int, str]]] = []
        for group in groups:
            try:
                results.append(profiler(group.events, ld, table))
            except IncompleteRequestError as exc:
                results.append((group.rid, str(exc)))
        return results

    analysis = Analysis(incomplete=dict(grouping.incomplete), discarded=grouping.discarded)
    for result in run_threaded(grouping.groups, work, num_threads=num_threads, batch_size=batch_size):
        if isinstance(result, RequestProfile):
            analysis.profiles.append(result)
        else:
            analysis.incomplete[result[0]] = result[1]
    logging.info(
        f"Profiled {len(analysis.profiles)} requests, {analysis.incomplete_count} incomplete, "
        f"{analysis.discarded} records discarded"
    )
    return analysis


def analyze(
    records: Iterable[TraceRecord],
    ld: LayerDescription,
    table: Optional[StringTable] = None,
    num_threads: int = 1,
    batch_size: int = 10000,
) -> Analysis:
    return profile_requests(group_by_rid(records), ld, table, num_threads=num_threads, batch_size=batch_size)


def write_profiles(path: Union[str, Path], profiles: Iterable[RequestProfile]) -> int:
    """Writes one JSON object per line and returns the number of profiles written."""
    count = 0
    with open(path, "w", encoding="utf-8") as out:
        for profile in profiles:
            out.write(json.dumps(profile.to_dict()) + "\n")
            count += 1
    logging.info(f"Wrote {count} request profiles to {path}")
    return count


def read_profiles(path: Union[str, Path]) -> List[RequestProfile]:
    with open(path, encoding="utf-8") as src:
        return [RequestProfile.from_dict(json.loads(line)) for line in src if line.strip()]
