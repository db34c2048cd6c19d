import random
import time

import pytest

from relay.analyzer import (
    IO_WAIT,
    IRQ,
    SCHED,
    UNATTRIBUTED,
    AttributionError,
    IncompleteRequestError,
    RequestProfile,
    analyze,
    check_conservation,
    check_truth,
    compare_profiles,
    compute_request_profile,
    cpi_of,
    group_by_rid,
    oracle_profile,
    profile_requests,
    read_profiles,
    sweep_segments,
    write_profiles,
)
from relay.profile import default_layers
from relay.simulator import (
    CacheModel,
    DeviceModel,
    IrqModel,
    LatencyModel,
    SchedModel,
    ScenarioConfig,
    SlowdownModel,
    SpikeInjection,
    preset,
    simulate,
)
from relay.trace import EventKind, HwSample, StringTable, TraceRecord, make_rid

K = EventKind
LD = default_layers()
TABLE = StringTable()
for _name in ("sys_read", "do_IRQ", "__schedule", "blk_mq_start_request", "blk_mq_complete_request"):
    TABLE.intern(_name)
for _name in LD.functions() + ["mystery_helper"]:
    TABLE.intern(_name)
F = {name: fid for fid, name in TABLE.items()}
RID = make_rid(1_000, 0)


def ev(kind, ts, func=0, hw=None, rid=RID):
    if kind in (K.IRQ_ENTER, K.IRQ_EXIT, K.SCHED_OUT, K.SCHED_IN):
        rid = 0
    hw = HwSample(*hw) if hw else HwSample(3 * ts, 3 * ts)
    return TraceRecord(kind, func, 4200, 4201, 0, rid, ts, hw)


def profile(events):
    return compute_request_profile(events, LD, TABLE)


def test_single_function():
    p = profile(
        [
            ev(K.SYSCALL_ENTER, 0, F["sys_read"]),
            ev(K.FUNC_ENTRY, 10, F["vfs_read"]),
            ev(K.FUNC_EXIT, 110, F["vfs_read"]),
            ev(K.SYSCALL_EXIT, 120, F["sys_read"]),
        ]
    )
    assert p.total == 120
    assert p.layers["vfs"] == 100
    assert p.unattributed_ns == 20
    assert sum(p.layers.values()) == 100
    assert check_conservation(p)


def test_interrupt_inside_nested_frames():
    p = profile(
        [
            ev(K.SYSCALL_ENTER, 0, F["sys_read"], (0, 0)),
            ev(K.FUNC_ENTRY, 0, F["ksys_read"], (0, 0)),
            ev(K.FUNC_ENTRY, 100, F["filemap_read"], (300, 300)),
            ev(K.IRQ_ENTER, 150, F["do_IRQ"], (450, 450)),
            ev(K.IRQ_EXIT, 250, F["do_IRQ"], (750, 600)),
            ev(K.FUNC_EXIT, 300, F["filemap_read"], (900, 750)),
            ev(K.FUNC_EXIT, 400, F["ksys_read"], (1200, 1050)),
            ev(K.SYSCALL_EXIT, 400, F["sys_read"], (1200, 1050)),
        ]
    )
    assert (p.layers["vfs"], p.layers["mm"], p.irq_ns, p.irq_count) == (200, 100, 100, 1)
    assert p.unattributed_ns == 0
    assert p.irq_hw == HwSample(300, 150)
    assert p.layer_hw["mm"] == HwSample(300, 300)
    assert p.layer_hw["vfs"] == HwSample(600, 600)
    assert cpi_of(p, "mm") == 1.0
    assert cpi_of(p, IRQ) == 2.0
    assert cpi_of(p) == 1.143
    assert cpi_of(p, "blk") is None


def test_device_wait_with_completion_interrupt():
    p = profile(
        [
            ev(K.SYSCALL_ENTER, 0, F["sys_read"]),
            ev(K.FUNC_ENTRY, 0, F["ksys_read"]),
            ev(K.OFFCPU_SUBMIT, 100, F["blk_mq_start_request"]),
            ev(K.SCHED_OUT, 100, F["__schedule"]),
            ev(K.IRQ_ENTER, 1_100, F["do_IRQ"]),
            ev(K.OFFCPU_COMPLETE, 1_100, F["blk_mq_complete_request"]),
            ev(K.IRQ_EXIT, 1_200, F["do_IRQ"]),
            ev(K.SCHED_IN, 1_200, F["__schedule"]),
            ev(K.FUNC_EXIT, 1_300, F["ksys_read"]),
            ev(K.SYSCALL_EXIT, 1_300, F["sys_read"]),
        ]
    )
    assert (p.layers["vfs"], p.io_wait_ns, p.irq_ns, p.sched_ns) == (200, 1_000, 100, 0)
    assert check_conservation(p)


def test_preemption_without_outstanding_io():
    p = profile(
        [
            ev(K.SYSCALL_ENTER, 0, F["sys_read"]),
            ev(K.FUNC_ENTRY, 0, F["vfs_read"]),
            ev(K.SCHED_OUT, 50, F["__schedule"]),
            ev(K.SCHED_IN, 80, F["__schedule"]),
            ev(K.FUNC_EXIT, 100, F["vfs_read"]),
            ev(K.SYSCALL_EXIT, 100, F["sys_read"]),
        ]
    )
    assert (p.layers["vfs"], p.sched_ns, p.io_wait_ns) == (70, 30, 0)


def test_unknown_function_is_unattributed():
    p = profile(
        [
            ev(K.SYSCALL_ENTER, 0, F["sys_read"]),
            ev(K.FUNC_ENTRY, 0, F["mystery_helper"]),
            ev(K.FUNC_ENTRY, 20, F["copy_page_to_iter"]),
            ev(K.FUNC_EXIT, 50, F["copy_page_to_iter"]),
            ev(K.FUNC_EXIT, 60, F["mystery_helper"]),
            ev(K.SYSCALL_EXIT, 60, F["sys_read"]),
        ]
    )
    assert (p.layers["cpy"], p.unattributed_ns) == (30, 30)


def test_malformed_requests():
    start = ev(K.SYSCALL_ENTER, 0, F["sys_read"])
    end = ev(K.SYSCALL_EXIT, 100, F["sys_read"])
    with pytest.raises(IncompleteRequestError):
        profile([start, ev(K.FUNC_ENTRY, 10, F["vfs_read"]), end])
    with pytest.raises(IncompleteRequestError):
        profile([start, ev(K.FUNC_EXIT, 10, F["vfs_read"]), end])
    with pytest.raises(IncompleteRequestError):
        profile([start, ev(K.FUNC_ENTRY, 10, F["vfs_read"])])
    with pytest.raises(AttributionError):
        profile([start, ev(K.IRQ_ENTER, 10, F["do_IRQ"]), ev(K.FUNC_ENTRY, 20, F["vfs_read"]), end])


def random_request(rng: random.Random, rid: int = RID):
    """A well-formed request with random nesting, interrupts and off-cpu windows."""
    clock, cycles, instructions = 0, 0, 0
    events = []
    functions = [fid for fid, name in TABLE.items() if fid > 5]

    def emit(kind, func=0):
        events.append(ev(kind, clock, func, (cycles, instructions), rid))

    def advance():
        nonlocal clock, cycles, instructions
        ns = rng.randint(0, 50)
        clock += ns
        cycles += 3 * ns
        instructions += rng.randint(0, 3 * ns)

    def interrupt(depth=0):
        emit(K.IRQ_ENTER, F["do_IRQ"])
        advance()
        if depth == 0 and rng.random() < 0.2:
            interrupt(depth + 1)
            advance()
        emit(K.IRQ_EXIT, F["do_IRQ"])

    def off_cpu(io):
        if io:
            emit(K.OFFCPU_SUBMIT, F["blk_mq_start_request"])
            advance()
        emit(K.SCHED_OUT, F["__schedule"])
        advance()
        if rng.random() < 0.5:
            emit(K.IRQ_ENTER, F["do_IRQ"])
            advance()
            if io:
                emit(K.OFFCPU_COMPLETE, F["blk_mq_complete_request"])
            emit(K.IRQ_EXIT, F["do_IRQ"])
        elif io:
            emit(K.OFFCPU_COMPLETE, F["blk_mq_complete_request"])
        advance()
        emit(K.SCHED_IN, F["__schedule"])

    def body(depth):
        for _ in range(rng.randint(0, 4)):
            advance()
            roll = rng.random()
            if roll < 0.15:
                interrupt()
            elif roll < 0.25:
                off_cpu(io=rng.random() < 0.5)
            elif depth < 5:
                call(depth + 1)

    def call(depth):
        func = rng.choice(functions)
        emit(K.FUNC_ENTRY, func)
        body(depth)
        advance()
        emit(K.FUNC_EXIT, func)

    emit(K.SYSCALL_ENTER, F["sys_read"])
    body(0)
    advance()
    emit(K.SYSCALL_EXIT, F["sys_read"])
    return events


def test_stack_walk_matches_segment_sweep():
    rng = random.Random(2024)
    checked = 0
    while checked < 1_000:
        events = random_request(rng)
        if len(events) > 50:
            continue
        checked += 1
        assert len(sweep_segments(events, LD, TABLE)) == len(events) - 1
        walked = compute_request_profile(events, LD, TABLE)
        swept = oracle_profile(events, LD, TABLE)
        assert compare_profiles(walked, swept) is None
        assert check_conservation(walked)


def test_segments_cover_the_request():
    events = random_request(random.Random(5))
    segments = sweep_segments(events, LD, TABLE)
    assert segments[0].start == events[0].ts
    assert segments[-1].end == events[-1].ts
    assert all(a.end == b.start for a, b in zip(segments, segments[1:]))
    buckets = {s.bucket for s in segments}
    assert buckets <= set(LD.names()) | {IRQ, SCHED, IO_WAIT, UNATTRIBUTED}


def test_compare_profiles_names_the_bucket():
    events = random_request(random.Random(9))
    a = compute_request_profile(events, LD, TABLE)
    b = compute_request_profile(events, LD, TABLE)
    b.layers["blk"] += 1
    assert compare_profiles(a, b) == ("layers.blk", a.layers["blk"], a.layers["blk"] + 1)


def scenario(**changes):
    settings = dict(
        name="analyzed",
        threads=2,
        requests_per_thread=60,
        pattern="random",
        cache=CacheModel(miss_probability=0.6, hit_latencies={"mm": LatencyModel(4_000, 400)}),
        layer_base_latencies={
            "vfs": LatencyModel(3_000, 300),
            "mm": LatencyModel(5_000, 500),
            "fs": LatencyModel(1_500, 150),
            "blk": LatencyModel(2_500, 250),
            "req": LatencyModel(3_000, 300),
            "drv": LatencyModel(4_000, 400),
            "cpy": LatencyModel(6_500, 650),
            "io": LatencyModel(1_500, 150),
        },
        irq_model=IrqModel(rate=0.8, steering=(3, 1)),
        sched_model=SchedModel(probability=0.2),
        slowdown=SlowdownModel(probability=0.1, min_permille=1500, max_permille=2000),
        spike_injections=(SpikeInjection(3, "cpy", 9_000), SpikeInjection(2, "irq", 12_000, thread=1)),
        seed=99,
    )
    settings.update(changes)
    return ScenarioConfig(**settings)


def test_analysis_recovers_injected_truth():
    result = simulate(scenario())
    analysis = analyze(result.records, LD, result.table)
    assert analysis.incomplete == {}
    assert analysis.discarded == 0
    assert len(analysis.profiles) == len(result.truth.requests)
    for p in analysis.profiles:
        assert check_truth(p, result.truth.requests[p.rid]) is None
        assert check_conservation(p)


@pytest.mark.parametrize("depth", ["L1", "L3", "L5", "L7"])
def test_shallow_probes_keep_totals(depth):
    result = simulate(scenario().with_overrides(depth=depth))
    analysis = analyze(result.records, LD, result.table)
    assert len(analysis.profiles) == len(result.truth.requests)
    for p in analysis.profiles:
        truth = result.truth.requests[p.rid]
        assert (p.total, p.irq_ns, p.sched_ns, p.io_wait_ns) == (
            truth.total,
            truth.irq_ns,
            truth.sched_ns,
            truth.io_wait_ns,
        )
        assert sum(p.layers.values()) == sum(truth.layers.values())
        assert p.unattributed_ns == 0


def test_housekeeping_interrupts_are_discarded():
    cfg = scenario(device_model=DeviceModel(completion="housekeeping"), irq_model=IrqModel(steering=(1, 1)))
    result = simulate(cfg)
    analysis = analyze(result.records, LD, result.table)
    assert analysis.discarded == 2 * result.truth.housekeeping_irqs > 0
    assert analysis.incomplete == {}
    for p in analysis.profiles:
        assert check_truth(p, result.truth.requests[p.rid]) is None


def test_grouping_ignores_cpu_interleaving():
    records = simulate(scenario(requests_per_thread=10)).records
    by_cpu = {}
    for rec in records:
        by_cpu.setdefault(rec.cpu, []).append(rec)
    concatenated = [rec for cpu in sorted(by_cpu, reverse=True) for rec in by_cpu[cpu]]
    a, b = group_by_rid(records), group_by_rid(concatenated)
    assert [g.rid for g in a.groups] == [g.rid for g in b.groups]
    assert [g.events for g in a.groups] == [g.events for g in b.groups]


def test_grouping_reports_incomplete_requests():
    records = simulate(scenario(requests_per_thread=4, threads=1, irq_model=IrqModel(), spike_injections=())).records
    exits = [i for i, rec in enumerate(records) if rec.kind == K.SYSCALL_EXIT]
    entries = [i for i, rec in enumerate(records) if rec.kind == K.SYSCALL_ENTER]
    damaged = [rec for i, rec in enumerate(records) if i not in (exits[0], entries[2])]
    grouping = group_by_rid(damaged)
    assert len(grouping.groups) == 2
    assert sorted(grouping.incomplete.values()) == ["missing syscall entry", "missing syscall exit"]


def test_threaded_profiling_matches_serial():
    result = simulate(scenario())
    grouping = group_by_rid(result.records)
    serial = profile_requests(grouping, LD, result.table)
    threaded = profile_requests(grouping, LD, result.table, num_threads=4, batch_size=7)
    assert threaded.profiles == serial.profiles


def test_failing_requests_are_listed_not_fatal():
    result = simulate(scenario(requests_per_thread=5))
    grouping = group_by_rid(result.records)
    victim = grouping.groups[2].rid

    def picky(events, ld, table):
        if events[0].rid == victim:
            raise IncompleteRequestError("not today")
        return compute_request_profile(events, ld, table)

    analysis = profile_requests(grouping, LD, result.table, profiler=picky)
    assert analysis.incomplete == {victim: "not today"}
    assert len(analysis.profiles) == len(grouping.groups) - 1


def test_profiles_file(tmp_path):
    result = simulate(scenario(requests_per_thread=5))
    profiles = analyze(result.records, LD, result.table).profiles
    path = tmp_path / "profiles.jsonl"
    assert write_profiles(path, profiles) == len(profiles)
    assert read_profiles(path) == profiles
    assert RequestProfile.from_dict(profiles[0].to_dict()) == profiles[0]


@pytest.mark.slow
def test_analyze_throughput():
    result = simulate(preset("randread_miss"))
    ld = default_layers()
    best = None
    for _ in range(3):
        started = time.perf_counter()
        analysis = analyze(result.records, ld, result.table, num_threads=1)
        elapsed = time.perf_counter() - started
        best = elapsed if best is None else min(best, elapsed)
    assert len(analysis.profiles) == 4_000
    assert len(result.records) / best >= 100_000
