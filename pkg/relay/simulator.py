"""
Deterministic stand-in for the instrumented kernel.

The simulator walks a modeled read path for every request of every thread and emits exactly the records the
front end's probe handlers would emit, together with the ground truth it injected. Nothing is measured: every
latency comes from the ScenarioConfig and a seeded SplitMix64 generator, so identical configs give identical
streams in any implementation.

Threads are pinned one per cpu (cpu index = thread index), share a pid and issue their reads back to back.
"""
import heapq
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

from .profile import (
    IRQ_LAYER,
    SCHED_LAYER,
    LayerDescription,
    ProbeDepth,
    ProfileDescription,
    default_layers,
    default_profile,
    probes_at_depth,
)
from .trace import (
    SITE_IRQ,
    SITE_OFFCPU_COMPLETE,
    SITE_OFFCPU_SUBMIT,
    SITE_SCHED,
    SITE_SYSCALL,
    EventKind,
    HwSample,
    RelayError,
    StringTable,
    TraceRecord,
    make_rid,
)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

CYCLES_PER_NS = 3
BASE_CPI_MILLI = 1000
PID = 4200
FIRST_TID = 4201
START_TS = 1_000_000
THREAD_STAGGER_NS = 1_000
MAX_CPUS = 256

IO_WAIT = "io_wait"
PATTERNS = ("sequential", "random")
COMPLETION_TARGETS = ("self", "housekeeping")

# op codes of a request plan
_ENTER, _EXIT, _RUN, _IRQ, _PREEMPT, _SUBMIT, _SLEEP = range(7)


class ScenarioError(RelayError):
    """Raised for invalid scenario configurations and unknown presets."""


class SplitMix64:
    """
    SplitMix64 generator.

    ``state += 0x9E3779B97F4A7C15``, then ``z = (z ^ z >> 30) * 0xBF58476D1CE4E5B9``,
    ``z = (z ^ z >> 27) * 0x94D049BB133111EB`` and ``z ^ z >> 31``, all modulo 2**64.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n). The modulo bias is below 2**-40 for every n used here."""
        return self.next() % n

    def uniform(self, low: int, high: int) -> int:
        """Uniform integer in [low, high]."""
        return low + self.below(high - low + 1)

    def chance(self, probability: float) -> bool:
        return (self.next() >> 11) * (1.0 / (1 << 53)) < probability


def derive_seed(seed: int, stream: int) -> int:
    """Seed of an independent stream, so threads and planning never share draws."""
    return SplitMix64((seed + stream * GOLDEN_GAMMA) & MASK64).next()


@dataclass(frozen=True)
class LatencyModel:
    """Mean plus a uniform integer jitter in [-jitter, +jitter], clamped at zero (ns)."""

    mean: int
    jitter: int = 0

    def draw(self, rng: SplitMix64) -> int:
        if self.jitter == 0:
            return self.mean
        return max(0, self.mean + rng.uniform(-self.jitter, self.jitter))


@dataclass(frozen=True)
class CacheModel:
    """Page cache behaviour.

    Sequential readers miss only at readahead boundaries (with ``miss_probability``, 0 for a warm file), random
    readers miss independently with ``miss_probability``. ``hit_latencies`` override layer latencies of hits.
    """

    miss_probability: float = 0.0
    readahead: int = 32
    hit_latencies: Dict[str, LatencyModel] = field(default_factory=dict)


@dataclass(frozen=True)
class SlowdownModel:
    """Correlated slowdown: one common factor (permille) applied to every non-io layer of a request."""

    probability: float = 0.0
    min_permille: int = 1000
    max_permille: int = 1000


@dataclass(frozen=True)
class DeviceModel:
    wait: LatencyModel = LatencyModel(80_000, 8_000)
    tail_probability: float = 0.0
    tail_factor: int = 4
    completion_irq: LatencyModel = LatencyModel(2_000, 200)
    completion: str = "self"


@dataclass(frozen=True)
class IrqModel:
    """Interrupts landing on traced cpus.

    ``rate`` is the expected number of interrupts per request. The stream-wide count is apportioned to threads by
    ``steering`` weight; each thread's share lands in requests drawn uniformly from the ``active`` fraction of its
    request sequence.
    """

    rate: float = 0.0
    duration: LatencyModel = LatencyModel(6_500, 650)
    steering: Tuple[int, ...] = (1,)
    thread_durations: Tuple[LatencyModel, ...] = ()
    active: Tuple[float, float] = (0.0, 1.0)

    def duration_of(self, thread: int) -> LatencyModel:
        return self.thread_durations[thread] if self.thread_durations else self.duration


@dataclass(frozen=True)
class SchedModel:
    probability: float = 0.0
    duration: LatencyModel = LatencyModel(20_000, 5_000)


@dataclass(frozen=True)
class SpikeInjection:
    """Extra latency injected into one request: an attributable layer, ``irq``, ``sched`` or ``io_wait``."""

    request: int
    layer: str
    added_ns: int
    thread: int = 0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    threads: int = 1
    requests_per_thread: int = 1
    pattern: str = "sequential"
    cache: CacheModel = CacheModel()
    layer_base_latencies: Dict[str, LatencyModel] = field(default_factory=dict)
    spike_injections: Tuple[SpikeInjection, ...] = ()
    spike_cpi_milli: int = 3000
    irq_model: IrqModel = IrqModel()
    irq_cpi_milli: int = 2000
    sched_model: SchedModel = SchedModel()
    device_model: DeviceModel = DeviceModel()
    slowdown: SlowdownModel = SlowdownModel()
    think_ns: int = 1_000
    depth: ProbeDepth = ProbeDepth.L8
    seed: int = 0

    @property
    def total_requests(self) -> int:
        return self.threads * self.requests_per_thread

    def with_overrides(self, seed: Optional[int] = None, depth: Union[ProbeDepth, int, str, None] = None):
        changes: Dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed & MASK64
        if depth is not None:
            changes["depth"] = ProbeDepth.parse(depth)
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["depth"] = str(self.depth)
        return data


def validate_config(cfg: ScenarioConfig, ld: LayerDescription) -> None:
    """Rejects invalid scenarios before anything is emitted."""
    problems = []
    if cfg.threads < 1:
        problems.append("threads must be at least 1")
    if cfg.requests_per_thread < 1:
        problems.append("requests_per_thread must be at least 1")
    cpus = cfg.threads + (1 if cfg.device_model.completion == "housekeeping" else 0)
    if cpus > MAX_CPUS:
        problems.append(f"{cpus} cpus do not fit the 8 cpu bits of a request id")
    if cfg.pattern not in PATTERNS:
        problems.append(f"pattern must be one of {PATTERNS}")
    if cfg.think_ns < 1:
        problems.append("think_ns must be at least 1 so request ids stay unique")
    if cfg.cache.readahead < 1:
        problems.append("cache.readahead must be at least 1")
    for label, probability in (
        ("cache.miss_probability", cfg.cache.miss_probability),
        ("slowdown.probability", cfg.slowdown.probability),
        ("sched_model.probability", cfg.sched_model.probability),
        ("device_model.tail_probability", cfg.device_model.tail_probability),
    ):
        if not 0.0 <= probability <= 1.0:
            problems.append(f"{label} must be within [0, 1]")
    if cfg.irq_model.rate < 0:
        problems.append("irq_model.rate must be non-negative")
    weights = cfg.irq_model.steering
    if len(weights) != cfg.threads or any(w < 0 for w in weights) or sum(weights) <= 0:
        problems.append("irq_model.steering needs one non-negative weight per thread with a positive sum")
    if cfg.irq_model.thread_durations and len(cfg.irq_model.thread_durations) != cfg.threads:
        problems.append("irq_model.thread_durations needs one model per thread")
    low, high = cfg.irq_model.active
    if not 0.0 <= low < high <= 1.0:
        problems.append("irq_model.active must satisfy 0 <= start < end <= 1")
    if cfg.device_model.completion not in COMPLETION_TARGETS:
        problems.append(f"device_model.completion must be one of {COMPLETION_TARGETS}")
    if cfg.device_model.tail_factor < 1:
        problems.append("device_model.tail_factor must be at least 1")
    if not 1000 <= cfg.slowdown.min_permille <= cfg.slowdown.max_permille:
        problems.append("slowdown permille range must satisfy 1000 <= min <= max")
    if cfg.spike_cpi_milli < 1 or cfg.irq_cpi_milli < 1:
        problems.append("cpi values must be positive")
    layer_names = set(ld.names())
    for name in list(cfg.layer_base_latencies) + list(cfg.cache.hit_latencies):
        if name not in layer_names:
            problems.append(f"unknown layer {name}")
    for spike in cfg.spike_injections:
        if spike.layer not in layer_names | {IRQ_LAYER, SCHED_LAYER, IO_WAIT}:
            problems.append(f"spike layer {spike.layer} unknown")
        if not 0 <= spike.thread < cfg.threads or not 0 <= spike.request < cfg.requests_per_thread:
            problems.append(f"spike target thread {spike.thread} request {spike.request} out of range")
        if spike.added_ns < 0:
            problems.append("spike added_ns must be non-negative")
    for function in _path_functions(READ_PATH):
        if ld.layer_of(function) is None:
            problems.append(f"modeled function {function} has no layer")
    if problems:
        raise ScenarioError(f"Invalid scenario {cfg.name}: " + "; ".join(problems))


@dataclass(frozen=True)
class PathNode:
    function: str
    children: Tuple["PathNode", ...] = ()
    miss_only: bool = False


SUBMIT_FUNCTION = "scsi_queue_rq"
SLEEP_FUNCTION = "io_schedule"


def _chain(functions: Tuple[str, ...], leaf: Tuple[PathNode, ...] = ()) -> Tuple[PathNode, ...]:
    """Nests every function in the one before it, the last one holding leaf."""
    children = leaf
    for function in reversed(functions):
        children = (PathNode(function, children),)
    return children


_SUBMIT_PATH = _chain(
    ("submit_bio", "submit_bio_noacct", "blk_mq_submit_bio", "blk_mq_dispatch_rq_list", SUBMIT_FUNCTION)
)
_MISS_PATH = (
    PathNode("page_cache_sync_ra", _chain(("ext4_mpage_readpages",), _SUBMIT_PATH), miss_only=True),
    PathNode(SLEEP_FUNCTION, miss_only=True),
)

# The modeled read path; children are listed in call order.
(READ_PATH,) = _chain(
    ("ksys_read", "vfs_read", "ext4_file_read_iter", "generic_file_read_iter"),
    (PathNode("filemap_read", (PathNode("filemap_get_pages", _MISS_PATH), PathNode("copy_page_to_iter"))),),
)


def _path_functions(node: PathNode, miss: bool = True) -> List[str]:
    if node.miss_only and not miss:
        return []
    functions = [node.function]
    for child in node.children:
        functions.extend(_path_functions(child, miss))
    return functions


@dataclass
class RequestTruth:
    """What the simulator injected into one request."""

    rid: int
    tid: int
    cpu: int
    index: int
    start: int
    end: int
    layers: Dict[str, int]
    irq_ns: int = 0
    irq_count: int = 0
    sched_ns: int = 0
    io_wait_ns: int = 0
    miss: bool = False
    spikes: List[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.end - self.start

    def component_sum(self) -> int:
        return sum(self.layers.values()) + self.irq_ns + self.sched_ns + self.io_wait_ns


@dataclass
class GroundTruth:
    scenario: str
    seed: int
    depth: str
    requests: Dict[int, RequestTruth] = field(default_factory=dict)
    irq_counts: Dict[int, int] = field(default_factory=dict)
    irq_ns: Dict[int, int] = field(default_factory=dict)
    housekeeping_irqs: int = 0

    def to_json(self) -> str:
        data = {
            "scenario": self.scenario,
            "seed": self.seed,
            "depth": self.depth,
            "irq_counts": {str(tid): n for tid, n in sorted(self.irq_counts.items())},
            "irq_ns": {str(tid): n for tid, n in sorted(self.irq_ns.items())},
            "housekeeping_irqs": self.housekeeping_irqs,
            "requests": [dict(asdict(truth), total=truth.total) for truth in self.requests.values()],
        }
        return json.dumps(data, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        data = json.loads(text)
        truth = cls(data["scenario"], data["seed"], data["depth"], housekeeping_irqs=data["housekeeping_irqs"])
        truth.irq_counts = {int(tid): n for tid, n in data["irq_counts"].items()}
        truth.irq_ns = {int(tid): n for tid, n in data["irq_ns"].items()}
        for item in data["requests"]:
            item.pop("total")
            request = RequestTruth(**item)
            truth.requests[request.rid] = request
        return truth


class SimulationResult(NamedTuple):
    records: List[TraceRecord]
    truth: GroundTruth
    table: StringTable


def apportion(total: int, weights: Sequence[int]) -> List[int]:
    """Largest-remainder split of ``total`` by integer weights; exact when total equals the weight sum."""
    weight_sum = sum(weights)
    shares = [total * w // weight_sum for w in weights]
    remainders = sorted(range(len(weights)), key=lambda i: (-(total * weights[i] % weight_sum), i))
    for i in remainders[: total - sum(shares)]:
        shares[i] += 1
    return shares


class _Cpu:
    """Clock, hardware counters and record buffer of one cpu."""

    def __init__(self, cpu: int, pid: int, tid: int, ts: int):
        self.cpu = cpu
        self.pid = pid
        self.tid = tid
        self.ts = ts
        self.cycles = 0
        self.instructions = 0
        self.records: List[TraceRecord] = []

    def emit(self, kind: EventKind, func: int, rid: int = 0) -> None:
        hw = HwSample(self.cycles, self.instructions)
        self.records.append(TraceRecord(kind, func, self.pid, self.tid, self.cpu, rid, self.ts, hw))

    def run(self, ns: int, cpi_milli: int) -> None:
        cycles = ns * CYCLES_PER_NS
        self.ts += ns
        self.cycles += cycles
        self.instructions += cycles * 1000 // cpi_milli


class _Simulation:
    def __init__(self, cfg: ScenarioConfig, profile: ProfileDescription, ld: LayerDescription):
        self.cfg = cfg
        self.ld = ld
        self.table = StringTable()
        active = probes_at_depth(profile, cfg.depth)
        self.sites = {
            name: self.table.intern(name)
            for name in (SITE_SYSCALL, SITE_IRQ, SITE_SCHED, SITE_OFFCPU_SUBMIT, SITE_OFFCPU_COMPLETE)
        }
        self.functions = {function: self.table.intern(function) for function in _path_functions(READ_PATH)}
        self.entry_probes = {probe.function for probe in active.probes if probe.entry}
        self.exit_probes = {probe.function for probe in active.probes if probe.exit}
        self.layer_names = ld.names()
        self.paths = {miss: self._frames(READ_PATH, miss) for miss in (False, True)}
        self.spikes: Dict[Tuple[int, int], List[SpikeInjection]] = {}
        for spike in cfg.spike_injections:
            self.spikes.setdefault((spike.thread, spike.request), []).append(spike)
        self.truth = GroundTruth(cfg.name, cfg.seed, str(cfg.depth))
        self.housekeeping: List[Tuple[int, int, int]] = []

    def _frames(self, node: PathNode, miss: bool) -> Dict[str, List[str]]:
        by_layer: Dict[str, List[str]] = {}
        for function in _path_functions(node, miss):
            by_layer.setdefault(self.ld.layer_of(function), []).append(function)
        return by_layer

    def plan_irqs(self) -> List[Dict[int, List[int]]]:
        """Steered interrupts per thread: request index -> durations."""
        cfg = self.cfg
        plans: List[Dict[int, List[int]]] = [{} for _ in range(cfg.threads)]
        total = round(cfg.irq_model.rate * cfg.total_requests)
        if total == 0:
            return plans
        rng = SplitMix64(derive_seed(cfg.seed, 0))
        counts = apportion(total, cfg.irq_model.steering)
        n = cfg.requests_per_thread
        low = min(int(cfg.irq_model.active[0] * n), n - 1)
        high = max(low + 1, min(int(cfg.irq_model.active[1] * n), n))
        for thread, count in enumerate(counts):
            model = cfg.irq_model.duration_of(thread)
            for _ in range(count):
                index = low + rng.below(high - low)
                plans[thread].setdefault(index, []).append(model.draw(rng))
        logging.debug(f"Planned {total} steered interrupts as {counts}")
        return plans

    def run(self) -> SimulationResult:
        cfg = self.cfg
        plans = self.plan_irqs()
        cpus = []
        for thread in range(cfg.threads):
            cpu = _Cpu(thread, PID, FIRST_TID + thread, START_TS + thread * THREAD_STAGGER_NS)
            rng = SplitMix64(derive_seed(cfg.seed, thread + 1))
            self.truth.irq_counts[cpu.tid] = 0
            self.truth.irq_ns[cpu.tid] = 0
            for index in range(cfg.requests_per_thread):
                miss = self._is_miss(rng, index)
                spikes = self.spikes.get((thread, index), [])
                if any(self._needs_miss(spike.layer) for spike in spikes):
                    miss = True
                ops = self._plan_request(rng, miss, spikes, plans[thread].get(index, []))
                self._emit_request(cpu, ops, index, miss, spikes)
                cpu.run(cfg.think_ns, BASE_CPI_MILLI)
            cpus.append(cpu)

        if self.housekeeping:
            cpus.append(self._emit_housekeeping(cfg.threads))

        records = list(heapq.merge(*(cpu.records for cpu in cpus), key=lambda r: (r.ts, r.cpu)))
        logging.info(
            f"Simulated {cfg.name}: {cfg.total_requests} requests, {len(records)} records at depth {cfg.depth}, "
            f"{self.truth.housekeeping_irqs} housekeeping interrupts"
        )
        return SimulationResult(records, self.truth, self.table)

    def _needs_miss(self, layer: str) -> bool:
        """Spikes aimed at the device or at layers only reached on a miss force the request to miss."""
        return layer == IO_WAIT or (layer in self.layer_names and layer not in self.paths[False])

    def _is_miss(self, rng: SplitMix64, index: int) -> bool:
        cache = self.cfg.cache
        if self.cfg.pattern == "sequential" and index % cache.readahead:
            return False
        return rng.chance(cache.miss_probability)

    def _layer_times(self, rng: SplitMix64, miss: bool) -> Dict[str, int]:
        cfg = self.cfg
        on_path = self.paths[miss]
        times = {}
        for layer in self.layer_names:
            if layer not in on_path:
                continue
            model = None if miss else cfg.cache.hit_latencies.get(layer)
            model = model or cfg.layer_base_latencies.get(layer)
            times[layer] = model.draw(rng) if model else 0
        if cfg.slowdown.probability and rng.chance(cfg.slowdown.probability):
            factor = rng.uniform(cfg.slowdown.min_permille, cfg.slowdown.max_permille)
            for layer in times:
                if layer != self.ld.wait:
                    times[layer] = times[layer] * factor // 1000
        return times

    def _plan_request(
        self, rng: SplitMix64, miss: bool, spikes: List[SpikeInjection], steered: List[int]
    ) -> List[tuple]:
        cfg = self.cfg
        times = self._layer_times(rng, miss)
        spike_ns = {spike.layer: spike.added_ns for spike in spikes if spike.layer in times}

        shares: Dict[str, int] = {}
        for layer, functions in self.paths[miss].items():
            total, k = times.get(layer, 0), len(functions)
            for i, function in enumerate(functions):
                shares[function] = total // k + (1 if i < total % k else 0)

        sleep = None
        if miss:
            io_ns = cfg.device_model.wait.draw(rng)
            if cfg.device_model.tail_probability and rng.chance(cfg.device_model.tail_probability):
                io_ns *= cfg.device_model.tail_factor
            io_ns += sum(spike.added_ns for spike in spikes if spike.layer == IO_WAIT)
            sleep = (_SLEEP, io_ns, cfg.device_model.completion_irq.draw(rng))

        ops: List[tuple] = []
        first_of_layer = set()

        def walk(node: PathNode):
            if node.miss_only and not miss:
                return
            function = node.function
            layer = self.ld.layer_of(function)
            share = shares[function]
            pre = share - share // 2
            ops.append((_ENTER, function))
            ops.append((_RUN, layer, pre, BASE_CPI_MILLI))
            if layer in spike_ns and layer not in first_of_layer:
                ops.append((_RUN, layer, spike_ns[layer], cfg.spike_cpi_milli))
            first_of_layer.add(layer)
            if function == SUBMIT_FUNCTION:
                ops.append((_SUBMIT,))
            elif function == SLEEP_FUNCTION:
                ops.append(sleep)
            for child in node.children:
                walk(child)
            ops.append((_RUN, layer, share // 2, BASE_CPI_MILLI))
            ops.append((_EXIT, function))

        walk(READ_PATH)

        for spike in spikes:
            if spike.layer == IRQ_LAYER:
                index = next(
                    (i for i, op in enumerate(ops) if op[0] == _RUN and op[1] == "mm"),
                    next(i for i, op in enumerate(ops) if op[0] == _RUN),
                )
                _interrupt(ops, index, ops[index][2] // 2, (_IRQ, spike.added_ns))
            elif spike.layer == SCHED_LAYER:
                index = next(i for i, op in enumerate(ops) if op[0] == _RUN)
                _interrupt(ops, index, ops[index][2] // 2, (_PREEMPT, spike.added_ns))

        for duration in steered:
            self._interrupt_randomly(rng, ops, (_IRQ, duration))
        if cfg.sched_model.probability and rng.chance(cfg.sched_model.probability):
            self._interrupt_randomly(rng, ops, (_PREEMPT, cfg.sched_model.duration.draw(rng)))
        return ops

    @staticmethod
    def _interrupt_randomly(rng: SplitMix64, ops: List[tuple], interruption: tuple) -> None:
        runs = [i for i, op in enumerate(ops) if op[0] == _RUN]
        if interruption[0] == _PREEMPT:
            # a preemption with a submitted request outstanding reads as device wait
            submit = next((i for i, op in enumerate(ops) if op[0] == _SUBMIT), None)
            if submit is not None:
                sleep = next(i for i, op in enumerate(ops) if op[0] == _SLEEP)
                runs = [i for i in runs if not submit < i < sleep]
        index = runs[rng.below(len(runs))]
        _interrupt(ops, index, rng.uniform(0, ops[index][2]), interruption)

    def _emit_request(self, cpu: _Cpu, ops: List[tuple], index: int, miss: bool, spikes: List[SpikeInjection]):
        cfg = self.cfg
        sites = self.sites
        rid = make_rid(cpu.ts, cpu.cpu)
        truth = RequestTruth(
            rid, cpu.tid, cpu.cpu, index, cpu.ts, cpu.ts, {layer: 0 for layer in self.layer_names}, miss=miss
        )
        truth.spikes = [spike.layer for spike in spikes]
        cpu.emit(EventKind.SYSCALL_ENTER, sites[SITE_SYSCALL], rid)
        for op in ops:
            code = op[0]
            if code == _RUN:
                truth.layers[op[1]] += op[2]
                cpu.run(op[2], op[3])
            elif code == _ENTER:
                if op[1] in self.entry_probes:
                    cpu.emit(EventKind.FUNC_ENTRY, self.functions[op[1]], rid)
            elif code == _EXIT:
                if op[1] in self.exit_probes:
                    cpu.emit(EventKind.FUNC_EXIT, self.functions[op[1]], rid)
            elif code == _IRQ:
                cpu.emit(EventKind.IRQ_ENTER, sites[SITE_IRQ])
                cpu.run(op[1], cfg.irq_cpi_milli)
                cpu.emit(EventKind.IRQ_EXIT, sites[SITE_IRQ])
                truth.irq_ns += op[1]
                truth.irq_count += 1
            elif code == _PREEMPT:
                cpu.emit(EventKind.SCHED_OUT, sites[SITE_SCHED])
                cpu.run(op[1], BASE_CPI_MILLI)
                cpu.emit(EventKind.SCHED_IN, sites[SITE_SCHED])
                truth.sched_ns += op[1]
            elif code == _SUBMIT:
                cpu.emit(EventKind.OFFCPU_SUBMIT, sites[SITE_OFFCPU_SUBMIT], rid)
            elif code == _SLEEP:
                _, io_ns, completion_ns = op
                cpu.emit(EventKind.SCHED_OUT, sites[SITE_SCHED])
                cpu.ts += io_ns
                truth.io_wait_ns += io_ns
                if cfg.device_model.completion == "self":
                    cpu.emit(EventKind.IRQ_ENTER, sites[SITE_IRQ])
                    cpu.run(completion_ns, cfg.irq_cpi_milli)
                    cpu.emit(EventKind.OFFCPU_COMPLETE, sites[SITE_OFFCPU_COMPLETE], rid)
                    cpu.emit(EventKind.IRQ_EXIT, sites[SITE_IRQ])
                    truth.irq_ns += completion_ns
                    truth.irq_count += 1
                else:
                    self.housekeeping.append((cpu.ts, cpu.cpu, completion_ns))
                    cpu.emit(EventKind.OFFCPU_COMPLETE, sites[SITE_OFFCPU_COMPLETE], rid)
                cpu.emit(EventKind.SCHED_IN, sites[SITE_SCHED])
        truth.end = cpu.ts
        cpu.emit(EventKind.SYSCALL_EXIT, sites[SITE_SYSCALL], rid)
        self.truth.requests[rid] = truth
        self.truth.irq_counts[cpu.tid] += truth.irq_count
        self.truth.irq_ns[cpu.tid] += truth.irq_ns

    def _emit_housekeeping(self, index: int) -> _Cpu:
        """Completion interrupts handled on an untraced cpu, serialized in arrival order."""
        cpu = _Cpu(index, 0, 0, START_TS)
        for ts, _, ns in sorted(self.housekeeping):
            cpu.ts = max(cpu.ts, ts)
            cpu.emit(EventKind.IRQ_ENTER, self.sites[SITE_IRQ])
            cpu.run(ns, self.cfg.irq_cpi_milli)
            cpu.emit(EventKind.IRQ_EXIT, self.sites[SITE_IRQ])
        self.truth.housekeeping_irqs = len(self.housekeeping)
        return cpu


def _interrupt(ops: List[tuple], index: int, offset: int, interruption: tuple) -> None:
    """Splits the run at ``index`` after ``offset`` ns and places the interruption in between."""
    _, layer, ns, cpi = ops[index]
    ops[index : index + 1] = [(_RUN, layer, offset, cpi), interruption, (_RUN, layer, ns - offset, cpi)]


def simulate(
    cfg: ScenarioConfig,
    profile: Optional[ProfileDescription] = None,
    ld: Optional[LayerDescription] = None,
) -> SimulationResult:
    """
    Runs a scenario.

    Args:
        cfg: The scenario; its seed and probe depth are part of it.
        profile: Profile script deciding which functions are probed (shipped read-path profile by default).
        ld: Layer description used for the ground truth (shipped default by default).

    Returns:
        The merged record stream ordered by (ts, cpu) with per-cpu order preserved, the ground truth and the string
        table of the session.
    """
    profile = profile or default_profile()
    ld = ld or default_layers()
    validate_config(cfg, ld)
    return _Simulation(cfg, profile, ld).run()


_RANDOM_READ_LATENCIES = {
    "vfs": LatencyModel(3_000, 300),
    "mm": LatencyModel(5_000, 500),
    "fs": LatencyModel(1_500, 150),
    "blk": LatencyModel(2_500, 250),
    "req": LatencyModel(3_000, 300),
    "drv": LatencyModel(4_000, 400),
    "cpy": LatencyModel(6_500, 650),
    "io": LatencyModel(1_500, 150),
}
_RANDOM_READ_HITS = {"mm": LatencyModel(4_000, 400), "fs": LatencyModel(400, 40)}

# (request index, layer, added ns) of the page-cache-hit tails
SEQREAD_SPIKES = (
    (180, "vfs", 10_000),
    (420, "cpy", 9_000),
    (760, "irq", 12_000),
    (1010, "vfs", 10_000),
    (1390, "irq", 12_000),
    (1720, "cpy", 9_000),
)

# interrupts handled per thread and the mean handling time of each (ns)
SKEW_IRQ_COUNTS = (7276, 128, 2953, 121)
SKEW_IRQ_NS = (47_849_914, 816_828, 19_398_496, 787_582)


def _seqread_hit() -> ScenarioConfig:
    return ScenarioConfig(
        name="seqread_hit",
        threads=1,
        requests_per_thread=2_000,
        pattern="sequential",
        cache=CacheModel(miss_probability=0.0),
        layer_base_latencies={
            "vfs": LatencyModel(4_000, 150),
            "fs": LatencyModel(500, 50),
            "mm": LatencyModel(6_000, 150),
            "cpy": LatencyModel(7_500, 150),
        },
        spike_injections=tuple(SpikeInjection(index, layer, ns) for index, layer, ns in SEQREAD_SPIKES),
    )


def _randread_miss() -> ScenarioConfig:
    return ScenarioConfig(
        name="randread_miss",
        threads=1,
        requests_per_thread=4_000,
        pattern="random",
        cache=CacheModel(miss_probability=0.97, hit_latencies=dict(_RANDOM_READ_HITS)),
        layer_base_latencies=dict(_RANDOM_READ_LATENCIES),
        device_model=DeviceModel(
            wait=LatencyModel(80_000, 8_000),
            tail_probability=0.005,
            tail_factor=4,
            completion_irq=LatencyModel(2_500, 300),
            completion="self",
        ),
        slowdown=SlowdownModel(probability=0.01, min_permille=1500, max_permille=2000),
        sched_model=SchedModel(probability=0.002, duration=LatencyModel(15_000, 5_000)),
    )


def _mt_irq_skew() -> ScenarioConfig:
    requests_per_thread = 22_500
    total = 4 * requests_per_thread
    return ScenarioConfig(
        name="mt_irq_skew",
        threads=4,
        requests_per_thread=requests_per_thread,
        pattern="random",
        cache=CacheModel(miss_probability=0.97, hit_latencies=dict(_RANDOM_READ_HITS)),
        layer_base_latencies=dict(_RANDOM_READ_LATENCIES),
        device_model=DeviceModel(
            wait=LatencyModel(80_000, 8_000), completion_irq=LatencyModel(2_500, 300), completion="housekeeping"
        ),
        irq_model=IrqModel(
            rate=sum(SKEW_IRQ_COUNTS) / total,
            steering=SKEW_IRQ_COUNTS,
            thread_durations=tuple(
                LatencyModel(ns // count, ns // count // 20) for ns, count in zip(SKEW_IRQ_NS, SKEW_IRQ_COUNTS)
            ),
            active=(4 / 15, 13 / 15),
        ),
    )


PRESETS = {
    "seqread_hit": _seqread_hit,
    "randread_miss": _randread_miss,
    "mt_irq_skew": _mt_irq_skew,
}


def preset(name: str) -> ScenarioConfig:
    """
    Returns a shipped scenario.

    Args:
        name: One of seqread_hit, randread_miss, mt_irq_skew.

    Returns:
        The preset's ScenarioConfig with seed 0 and probe depth L8.
    """
    try:
        return PRESETS[name]()
    except KeyError:
        raise ScenarioError(f"Unknown preset {name!r}, expected one of {sorted(PRESETS)}") from None
