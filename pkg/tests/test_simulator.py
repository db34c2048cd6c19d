import pytest

from relay.analyzer import analyze
from relay.profile import default_layers
from relay.simulator import (
    FIRST_TID,
    SKEW_IRQ_COUNTS,
    CacheModel,
    DeviceModel,
    GroundTruth,
    IrqModel,
    LatencyModel,
    SchedModel,
    ScenarioConfig,
    ScenarioError,
    SlowdownModel,
    SpikeInjection,
    SplitMix64,
    apportion,
    derive_seed,
    preset,
    simulate,
)
from relay.trace import EventKind, validate_stream

LATENCIES = {
    "vfs": LatencyModel(3_000, 300),
    "mm": LatencyModel(5_000, 500),
    "fs": LatencyModel(1_500, 150),
    "blk": LatencyModel(2_500, 250),
    "req": LatencyModel(3_000, 300),
    "drv": LatencyModel(4_000, 400),
    "cpy": LatencyModel(6_500, 650),
    "io": LatencyModel(1_500, 150),
}


def mixed_scenario(**changes) -> ScenarioConfig:
    """Two threads, half the reads miss, every interference source switched on."""
    settings = dict(
        name="mixed",
        threads=2,
        requests_per_thread=40,
        pattern="random",
        cache=CacheModel(miss_probability=0.5, hit_latencies={"mm": LatencyModel(4_000, 400)}),
        layer_base_latencies=dict(LATENCIES),
        irq_model=IrqModel(rate=0.5, steering=(1, 1)),
        sched_model=SchedModel(probability=0.1),
        slowdown=SlowdownModel(probability=0.1, min_permille=1500, max_permille=2000),
        device_model=DeviceModel(tail_probability=0.1),
        seed=7,
    )
    settings.update(changes)
    return ScenarioConfig(**settings)


def test_splitmix64_reference_values():
    rng = SplitMix64(0)
    assert rng.next() == 0xE220A8397B1DCDAF
    assert rng.next() == 0x6E789E6AA1B965F4
    assert SplitMix64(1234567).next() == 6457827717110365317


def test_splitmix64_ranges():
    rng = SplitMix64(42)
    draws = [rng.uniform(-3, 3) for _ in range(500)]
    assert min(draws) == -3 and max(draws) == 3
    assert not any(SplitMix64(1).chance(0.0) for _ in range(100))
    rng = SplitMix64(1)
    assert all(rng.chance(1.0) for _ in range(100))


def test_derive_seed_separates_streams():
    assert derive_seed(0, 1) != derive_seed(0, 2)
    assert derive_seed(5, 0) == derive_seed(5, 0)


def test_latency_without_jitter_draws_nothing():
    rng = SplitMix64(3)
    assert LatencyModel(1_000).draw(rng) == 1_000
    assert rng.state == 3
    assert LatencyModel(10, 100).draw(SplitMix64(3)) >= 0


def test_apportion():
    assert apportion(10, [1, 1, 1]) == [4, 3, 3]
    assert apportion(50, [3, 1]) == [38, 12]
    assert apportion(sum(SKEW_IRQ_COUNTS), SKEW_IRQ_COUNTS) == list(SKEW_IRQ_COUNTS)
    assert apportion(0, [2, 5]) == [0, 0]


def test_simulation_is_deterministic():
    first = simulate(mixed_scenario())
    second = simulate(mixed_scenario())
    assert first.records == second.records
    assert first.truth == second.truth
    assert first.table == second.table
    assert simulate(mixed_scenario(seed=8)).records != first.records


def test_stream_is_well_formed_and_ordered():
    result = simulate(mixed_scenario())
    assert validate_stream(result.records).ok
    keys = [(rec.ts, rec.cpu) for rec in result.records]
    assert keys == sorted(keys)
    assert len(result.truth.requests) == 80


def test_truth_conserves_time():
    result = simulate(mixed_scenario())
    for truth in result.truth.requests.values():
        assert truth.total == truth.component_sum()
        if truth.miss:
            assert truth.io_wait_ns > 0
        else:
            assert truth.io_wait_ns == 0
            assert truth.layers["io"] == 0


def test_requests_are_back_to_back_per_thread():
    cfg = mixed_scenario()
    result = simulate(cfg)
    by_tid = {}
    for truth in result.truth.requests.values():
        by_tid.setdefault(truth.tid, []).append(truth)
    assert sorted(by_tid) == [FIRST_TID, FIRST_TID + 1]
    for truths in by_tid.values():
        truths.sort(key=lambda t: t.index)
        for previous, current in zip(truths, truths[1:]):
            assert current.start == previous.end + cfg.think_ns


def test_depth_changes_records_not_truth():
    deep = simulate(mixed_scenario())
    shallow = simulate(mixed_scenario().with_overrides(depth="L1"))
    assert deep.truth.requests == shallow.truth.requests
    assert len(shallow.records) < len(deep.records)
    probed = {shallow.table.name(rec.func) for rec in shallow.records if rec.kind == EventKind.FUNC_ENTRY}
    assert probed == {"ksys_read", "vfs_read"}
    submits = [rec for rec in shallow.records if rec.kind == EventKind.OFFCPU_SUBMIT]
    assert len(submits) == sum(1 for truth in deep.truth.requests.values() if truth.miss)


def test_single_cached_read_at_shallowest_depth():
    cfg = ScenarioConfig(threads=1, requests_per_thread=1, layer_base_latencies={"vfs": LatencyModel(100)})
    result = simulate(cfg.with_overrides(depth="L1"))
    assert [(rec.kind, result.table.name(rec.func)) for rec in result.records] == [
        (EventKind.SYSCALL_ENTER, "sys_read"),
        (EventKind.FUNC_ENTRY, "ksys_read"),
        (EventKind.FUNC_ENTRY, "vfs_read"),
        (EventKind.FUNC_EXIT, "vfs_read"),
        (EventKind.FUNC_EXIT, "ksys_read"),
        (EventKind.SYSCALL_EXIT, "sys_read"),
    ]
    (profile,) = analyze(result.records, default_layers(), result.table).profiles
    assert profile.total == 100
    assert {layer: ns for layer, ns in profile.layers.items() if ns} == {"vfs": 100}
    assert profile.irq_ns == profile.sched_ns == profile.io_wait_ns == profile.unattributed_ns == 0


def test_steered_interrupts_follow_weights_and_active_range():
    cfg = ScenarioConfig(
        name="steered",
        threads=2,
        requests_per_thread=50,
        layer_base_latencies={"vfs": LatencyModel(2_000, 100), "cpy": LatencyModel(3_000, 100)},
        irq_model=IrqModel(rate=0.5, steering=(3, 1), active=(0.5, 1.0)),
    )
    truth = simulate(cfg).truth
    assert truth.irq_counts == {FIRST_TID: 38, FIRST_TID + 1: 12}
    assert all(t.irq_count == 0 for t in truth.requests.values() if t.index < 25)
    assert sum(t.irq_ns for t in truth.requests.values()) == sum(truth.irq_ns.values())


def test_spikes_land_in_their_request():
    cfg = ScenarioConfig(
        threads=1,
        requests_per_thread=5,
        layer_base_latencies={"vfs": LatencyModel(1_000), "mm": LatencyModel(2_000), "cpy": LatencyModel(3_000)},
        spike_injections=(
            SpikeInjection(1, "vfs", 10_000),
            SpikeInjection(2, "irq", 7_000),
            SpikeInjection(3, "sched", 9_000),
            SpikeInjection(4, "io_wait", 20_000),
        ),
    )
    requests = sorted(simulate(cfg).truth.requests.values(), key=lambda t: t.index)
    assert requests[0].total == 6_000
    assert requests[1].layers["vfs"] == 11_000
    assert (requests[2].irq_ns, requests[2].irq_count) == (7_000, 1)
    assert requests[3].sched_ns == 9_000
    assert requests[4].miss
    assert requests[4].spikes == ["io_wait"]
    assert requests[4].io_wait_ns >= 20_000


def test_housekeeping_completions_stay_off_traced_threads():
    cfg = mixed_scenario(device_model=DeviceModel(completion="housekeeping"), irq_model=IrqModel(steering=(1, 1)))
    result = simulate(cfg)
    misses = sum(1 for truth in result.truth.requests.values() if truth.miss)
    assert result.truth.housekeeping_irqs == misses > 0
    assert all(truth.irq_ns == 0 for truth in result.truth.requests.values())
    housekeeping = [rec for rec in result.records if rec.cpu == cfg.threads]
    assert len(housekeeping) == 2 * misses
    assert {rec.tid for rec in housekeeping} == {0}
    assert validate_stream(result.records).ok


def test_ground_truth_json():
    truth = simulate(mixed_scenario(requests_per_thread=5)).truth
    assert GroundTruth.from_json(truth.to_json()) == truth


def test_invalid_scenarios():
    with pytest.raises(ScenarioError):
        simulate(ScenarioConfig(threads=0))
    with pytest.raises(ScenarioError):
        simulate(ScenarioConfig(threads=2))
    with pytest.raises(ScenarioError):
        simulate(ScenarioConfig(spike_injections=(SpikeInjection(0, "nowhere", 10),)))
    with pytest.raises(ScenarioError):
        simulate(ScenarioConfig(spike_injections=(SpikeInjection(3, "vfs", 10),)))
    with pytest.raises(ScenarioError):
        simulate(ScenarioConfig(layer_base_latencies={"disk": LatencyModel(1)}))
    with pytest.raises(ScenarioError) as exc:
        simulate(ScenarioConfig(pattern="strided", cache=CacheModel(miss_probability=2.0)))
    assert "pattern" in str(exc.value) and "miss_probability" in str(exc.value)


def test_presets():
    assert preset("seqread_hit").total_requests == 2_000
    assert preset("randread_miss").total_requests == 4_000
    skew = preset("mt_irq_skew")
    assert skew.total_requests == 90_000
    assert round(skew.irq_model.rate * skew.total_requests) == sum(SKEW_IRQ_COUNTS)
    assert preset("seqread_hit").with_overrides(seed=-1).seed == 2**64 - 1
    with pytest.raises(ScenarioError):
        preset("nope")


def test_seqread_hit_never_misses():
    result = simulate(preset("seqread_hit"))
    truths = list(result.truth.requests.values())
    assert not any(truth.miss for truth in truths)
    spiked = sorted(truth.index for truth in truths if truth.spikes)
    assert spiked == [180, 420, 760, 1010, 1390, 1720]
    plain = [truth.total for truth in truths if not truth.spikes]
    assert 17_500 <= min(plain) and max(plain) <= 18_500
