"""
Trace record vocabulary shared by the simulator, the transport and the analyzer.

Every probe handler emits one fixed-shape record: what happened (``EventKind``), where (function, pid, tid, cpu),
for which request (``rid``), when (integer nanoseconds) and the cumulative hardware counters of the cpu at that
moment. Function names are interned into a session-scoped ``StringTable`` so records stay fixed-size on the wire.
"""
import logging
from dataclasses import dataclass, field
from enum import IntEnum, unique
from typing import Dict, Iterable, List, NamedTuple, Optional, Tuple

MAX_NAME_BYTES = 255
RID_CPU_BITS = 8
RID_CPU_MASK = (1 << RID_CPU_BITS) - 1
RID_MAX = (1 << 64) - 1

# probe sites of the records that are not function entries or exits
SITE_SYSCALL = "sys_read"
SITE_IRQ = "do_IRQ"
SITE_SCHED = "__schedule"
SITE_OFFCPU_SUBMIT = "blk_mq_start_request"
SITE_OFFCPU_COMPLETE = "blk_mq_complete_request"


class RelayError(Exception):
    """Base class for every error raised by relay."""


class InternError(RelayError):
    """Raised for function names that cannot be interned or ids that were never interned."""


@unique
class EventKind(IntEnum):
    """Kinds of probe-handler emissions. The integer value is the ``kind`` byte on the wire."""

    FUNC_ENTRY = 1
    FUNC_EXIT = 2
    IRQ_ENTER = 3
    IRQ_EXIT = 4
    SCHED_OUT = 5
    SCHED_IN = 6
    OFFCPU_SUBMIT = 7
    OFFCPU_COMPLETE = 8
    SYSCALL_ENTER = 9
    SYSCALL_EXIT = 10


class HwSample(NamedTuple):
    """Cumulative hardware counters of one cpu."""

    cycles: int = 0
    instructions: int = 0


class TraceRecord(NamedTuple):
    """One probe-handler emission."""

    kind: EventKind
    func: int
    pid: int
    tid: int
    cpu: int
    rid: int
    ts: int
    hw: HwSample = HwSample()


def make_rid(ts: int, cpu: int) -> int:
    """Composes a request id from the syscall-entry timestamp and the cpu index.

    The cpu sits in the low 8 bits so that requests entering at the same nanosecond on different cpus stay distinct.
    """
    return ((ts << RID_CPU_BITS) | (cpu & RID_CPU_MASK)) & RID_MAX


def rid_timestamp(rid: int) -> int:
    return rid >> RID_CPU_BITS


def rid_cpu(rid: int) -> int:
    return rid & RID_CPU_MASK


class StringTable:
    """Session-scoped interning of function names into dense ids starting at 1."""

    def __init__(self):
        self._ids: Dict[str, int] = {}
        self._names: List[str] = []

    def intern(self, name: str) -> int:
        """
        Returns the id of a function name, assigning the next free id on first sight.

        Args:
            name: Function name, non-empty and at most 255 bytes of UTF-8.

        Returns:
            The FunctionId of the name.
        """
        fid = self._ids.get(name)
        if fid is not None:
            return fid
        _check_name(name)
        self._names.append(name)
        fid = len(self._names)
        self._ids[name] = fid
        return fid

    def add(self, fid: int, name: str) -> None:
        """Registers a pair received from a string-table delta. Ids must arrive densely and in order."""
        _check_name(name)
        if fid != len(self._names) + 1:
            raise InternError(f"String table entry {fid} out of order, expected {len(self._names) + 1}")
        if name in self._ids:
            raise InternError(f"Function {name!r} already interned as {self._ids[name]}")
        self._names.append(name)
        self._ids[name] = fid

    def name(self, fid: int) -> str:
        if not 1 <= fid <= len(self._names):
            raise InternError(f"Unknown function id {fid}")
        return self._names[fid - 1]

    def lookup(self, fid: int) -> Optional[str]:
        return self._names[fid - 1] if 1 <= fid <= len(self._names) else None

    def id_of(self, name: str) -> Optional[int]:
        return self._ids.get(name)

    def items(self) -> List[Tuple[int, str]]:
        return [(i + 1, name) for i, name in enumerate(self._names)]

    @classmethod
    def from_items(cls, items: Iterable[Tuple[int, str]]) -> "StringTable":
        table = cls()
        for fid, name in sorted(items):
            table.add(fid, name)
        return table

    def __contains__(self, fid: int) -> bool:
        return 1 <= fid <= len(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __eq__(self, other) -> bool:
        return isinstance(other, StringTable) and self._names == other._names


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not name:
        raise InternError("Function name must be a non-empty string")
    if len(name.encode("utf-8")) > MAX_NAME_BYTES:
        raise InternError(f"Function name longer than {MAX_NAME_BYTES} bytes: {name[:32]!r}...")


class Violation(NamedTuple):
    index: int
    code: str
    message: str


@dataclass
class ValidationReport:
    """Outcome of ``validate_stream``; ``ok`` holds exactly when no violation was found."""

    errors: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def codes(self) -> List[str]:
        return [error.code for error in self.errors]


_THREAD_KINDS = {
    EventKind.FUNC_ENTRY,
    EventKind.FUNC_EXIT,
    EventKind.SYSCALL_ENTER,
    EventKind.SYSCALL_EXIT,
    EventKind.SCHED_OUT,
    EventKind.SCHED_IN,
}


def validate_stream(records: Iterable[TraceRecord]) -> ValidationReport:
    """
    Checks a record stream for well-formedness.

    Function entries and exits pair LIFO per thread, interrupts pair LIFO per cpu, timestamps and hardware counters
    never go backwards on a cpu, every request opens with SYSCALL_ENTER and closes with SYSCALL_EXIT on its owner
    thread and request ids grow with entry time on each cpu. Nothing is raised: every finding becomes a ``Violation``.

    Args:
        records: Records in emission order (per-cpu order must be preserved, cpus may interleave).

    Returns:
        A report listing every violation; per-record findings in stream order, then end-of-stream findings.
    """
    report = ValidationReport()
    errors = report.errors

    func_stacks: Dict[int, List[Tuple[int, int]]] = {}
    irq_stacks: Dict[int, List[Tuple[int, int]]] = {}
    last_ts: Dict[int, int] = {}
    last_hw: Dict[int, HwSample] = {}
    last_rid: Dict[int, int] = {}
    open_syscall: Dict[int, Tuple[int, int]] = {}
    open_rids: Dict[int, int] = {}
    seen_rids = set()
    sched_out: Dict[int, int] = {}

    index = -1
    for index, rec in enumerate(records):
        kind, cpu, tid = rec.kind, rec.cpu, rec.tid

        prev_ts = last_ts.get(cpu)
        if prev_ts is not None and rec.ts < prev_ts:
            errors.append(Violation(index, "ts-regression", f"cpu {cpu}: ts {rec.ts} after {prev_ts}"))
        last_ts[cpu] = rec.ts if prev_ts is None else max(prev_ts, rec.ts)

        prev_hw = last_hw.get(cpu)
        if prev_hw is not None and (rec.hw.cycles < prev_hw.cycles or rec.hw.instructions < prev_hw.instructions):
            errors.append(
                Violation(index, "hw-regression", f"cpu {cpu}: counters {tuple(rec.hw)} after {tuple(prev_hw)}")
            )
        last_hw[cpu] = rec.hw

        if kind in _THREAD_KINDS and irq_stacks.get(cpu):
            errors.append(Violation(index, "func-in-irq", f"cpu {cpu}: {kind.name} while an interrupt is open"))

        if kind == EventKind.FUNC_ENTRY:
            if rec.rid and (tid not in open_syscall or open_syscall[tid][0] != rec.rid):
                errors.append(Violation(index, "record-outside-syscall", f"tid {tid}: entry outside rid {rec.rid}"))
            func_stacks.setdefault(tid, []).append((rec.func, index))

        elif kind == EventKind.FUNC_EXIT:
            stack = func_stacks.get(tid, [])
            if not stack:
                errors.append(Violation(index, "unmatched-exit", f"tid {tid}: exit of {rec.func} with no open frame"))
            elif stack[-1][0] != rec.func:
                depth = next((i for i in range(len(stack) - 1, -1, -1) if stack[i][0] == rec.func), None)
                if depth is None:
                    errors.append(Violation(index, "unmatched-exit", f"tid {tid}: exit of {rec.func} never entered"))
                else:
                    errors.append(
                        Violation(index, "non-lifo-exit", f"tid {tid}: exit of {rec.func} over open {stack[-1][0]}")
                    )
                    del stack[depth:]
            else:
                stack.pop()

        elif kind == EventKind.IRQ_ENTER:
            irq_stacks.setdefault(cpu, []).append((rec.func, index))

        elif kind == EventKind.IRQ_EXIT:
            stack = irq_stacks.get(cpu, [])
            if not stack:
                errors.append(Violation(index, "irq-unmatched-exit", f"cpu {cpu}: interrupt exit with none open"))
            else:
                func, _ = stack.pop()
                if func != rec.func:
                    errors.append(Violation(index, "irq-non-lifo", f"cpu {cpu}: exit of {rec.func} over {func}"))

        elif kind == EventKind.SCHED_OUT:
            if tid in sched_out:
                errors.append(Violation(index, "sched-unmatched", f"tid {tid}: switched out twice"))
            sched_out[tid] = index

        elif kind == EventKind.SCHED_IN:
            if sched_out.pop(tid, None) is None:
                errors.append(Violation(index, "sched-unmatched", f"tid {tid}: switched in while running"))

        elif kind == EventKind.SYSCALL_ENTER:
            if tid in open_syscall:
                errors.append(Violation(index, "nested-syscall", f"tid {tid}: rid {rec.rid} inside open rid"))
            if rec.rid == 0 or rec.rid in seen_rids:
                errors.append(Violation(index, "bad-rid", f"rid {rec.rid} is reserved or reused"))
            elif rec.rid <= last_rid.get(cpu, 0):
                errors.append(Violation(index, "rid-order", f"cpu {cpu}: rid {rec.rid} not above {last_rid[cpu]}"))
            seen_rids.add(rec.rid)
            last_rid[cpu] = max(last_rid.get(cpu, 0), rec.rid)
            open_syscall[tid] = (rec.rid, index)
            open_rids[rec.rid] = tid

        elif kind == EventKind.SYSCALL_EXIT:
            current = open_syscall.get(tid)
            if current is None or current[0] != rec.rid:
                errors.append(Violation(index, "syscall-exit-without-entry", f"tid {tid}: exit of rid {rec.rid}"))
                continue
            for func, entry_index in func_stacks.pop(tid, []):
                errors.append(Violation(entry_index, "unmatched-entry", f"tid {tid}: {func} open at syscall exit"))
            if sched_out.pop(tid, None) is not None:
                errors.append(Violation(index, "sched-unmatched", f"tid {tid}: rid {rec.rid} exits while switched out"))
            del open_syscall[tid]
            del open_rids[rec.rid]

        elif kind in (EventKind.OFFCPU_SUBMIT, EventKind.OFFCPU_COMPLETE):
            if rec.rid not in open_rids:
                errors.append(Violation(index, "record-outside-syscall", f"{kind.name} for closed rid {rec.rid}"))

    errors.sort(key=lambda error: error.index)
    for tid, (rid, entry_index) in sorted(open_syscall.items()):
        errors.append(Violation(entry_index, "missing-syscall-exit", f"tid {tid}: rid {rid} never exits"))
    for tid, stack in sorted(func_stacks.items()):
        for func, entry_index in stack:
            errors.append(Violation(entry_index, "unmatched-entry", f"tid {tid}: {func} never exits"))
    for cpu, stack in sorted(irq_stacks.items()):
        for func, entry_index in stack:
            errors.append(Violation(entry_index, "irq-unmatched-entry", f"cpu {cpu}: interrupt never exits"))
    for tid, out_index in sorted(sched_out.items()):
        errors.append(Violation(out_index, "sched-unmatched", f"tid {tid}: never switched back in"))

    logging.debug(f"Validated {index + 1} records, {len(errors)} violations")
    return report
