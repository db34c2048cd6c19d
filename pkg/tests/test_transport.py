import io
import random
import socket
import threading
from collections import deque

import pytest

from relay.profile import ConfigError
from relay.simulator import CacheModel, IrqModel, LatencyModel, ScenarioConfig, simulate
from relay.trace import EventKind, HwSample, StringTable, TraceRecord
from relay.transport import (
    RECORD_SIZE,
    Agent,
    BatchEncoder,
    Collector,
    PushResult,
    RingBuffer,
    TraceWriter,
    TransportError,
    WireFormatError,
    agent_run,
    decode_batch,
    encode_batch,
    make_rings,
    parse_endpoint,
    read_trace,
    ring_drain,
    ring_push,
    stream_records,
    write_trace,
)


def rec(i, func=1, cpu=0, kind=EventKind.FUNC_ENTRY):
    return TraceRecord(kind, func, 4200, 4201 + cpu, cpu, i + 1, 1_000 + i, HwSample(3 * i, 2 * i))


def table_of(*names):
    table = StringTable()
    for name in names:
        table.intern(name)
    return table


def small_trace():
    cfg = ScenarioConfig(
        threads=2,
        requests_per_thread=30,
        pattern="random",
        cache=CacheModel(miss_probability=0.5),
        layer_base_latencies={"vfs": LatencyModel(3_000, 300), "cpy": LatencyModel(6_000, 600)},
        irq_model=IrqModel(rate=0.2, steering=(1, 1)),
        seed=11,
    )
    return simulate(cfg)


def session_trace():
    """Two threads of mixed hits and misses at full depth, at least 10,000 records."""
    cfg = ScenarioConfig(
        threads=2,
        requests_per_thread=400,
        pattern="random",
        cache=CacheModel(miss_probability=0.5),
        layer_base_latencies={"vfs": LatencyModel(3_000, 300), "cpy": LatencyModel(6_000, 600)},
        irq_model=IrqModel(rate=0.2, steering=(1, 1)),
        seed=29,
    )
    return simulate(cfg)


def offline_bytes(records, table, batch_records):
    buffer = io.BytesIO()
    with TraceWriter(buffer, table, batch_records) as writer:
        writer.write(records)
    return buffer.getvalue()


def test_record_is_48_bytes():
    assert RECORD_SIZE == 48
    assert len(encode_batch([rec(0)], [(1, "vfs_read")])) == 4 + 4 + 5 + 8 + 4 + 48


def test_ring_full_drops_newest():
    ring = RingBuffer()
    capacity = ring.capacity // RECORD_SIZE
    assert capacity == 87_381
    for i in range(capacity):
        assert ring_push(ring, rec(i)) is PushResult.ACCEPTED
    assert ring_push(ring, rec(capacity)) is PushResult.DROPPED
    assert (ring.accepted, ring.dropped, ring.records_in) == (capacity, 1, capacity + 1)
    drained = ring_drain(ring, 2)
    assert [r.rid for r in drained] == [1, 2]
    assert len(ring) == capacity - 2
    assert ring.free == ring.capacity - (capacity - 2) * RECORD_SIZE


def test_ring_wraps_around():
    ring = RingBuffer(3 * RECORD_SIZE + 10)
    for i in range(3):
        ring.push(rec(i))
    assert [r.rid for r in ring.drain(2)] == [1, 2]
    assert ring.push(rec(3)) is PushResult.ACCEPTED
    assert ring.push(rec(4)) is PushResult.ACCEPTED
    assert ring.push(rec(5)) is PushResult.DROPPED
    assert ring.drain() == [rec(2), rec(3), rec(4)]
    assert len(ring) == 0


def test_ring_rejects_tiny_capacity():
    with pytest.raises(ConfigError):
        RingBuffer(RECORD_SIZE - 1)


def test_stream_records_counts_drops():
    ring = RingBuffer(10 * RECORD_SIZE)
    assert stream_records([rec(i) for i in range(15)], {0: ring}) == 15
    assert (ring.accepted, ring.dropped) == (10, 5)


def test_decode_batch():
    records = [rec(0, func=1), rec(1, func=2, kind=EventKind.FUNC_EXIT)]
    table = StringTable()
    batch = decode_batch(encode_batch(records, [(1, "vfs_read"), (2, "filemap_read")]), table)
    assert batch.records == records
    assert batch.table_delta == [(1, "vfs_read"), (2, "filemap_read")]
    assert table.name(2) == "filemap_read"


def test_decode_errors_carry_offsets():
    header = 4 + 4 + 5 + len("vfs_read") + 4
    good = encode_batch([rec(0)], [(1, "vfs_read")])

    with pytest.raises(WireFormatError) as exc:
        decode_batch(encode_batch([rec(0, func=2)], [(1, "vfs_read")]))
    assert exc.value.offset == header

    with pytest.raises(WireFormatError) as exc:
        decode_batch(encode_batch([rec(0)._replace(kind=99)], [(1, "vfs_read")]))
    assert exc.value.offset == header

    with pytest.raises(WireFormatError) as exc:
        decode_batch(good[:-1])
    assert exc.value.offset == header

    with pytest.raises(WireFormatError) as exc:
        decode_batch(good + b"\0")
    assert exc.value.offset == len(good)

    with pytest.raises(WireFormatError) as exc:
        decode_batch(b"P2L9" + good[4:])
    assert exc.value.offset == 0


def test_batch_encoder_ships_dense_prefix_once():
    encoder = BatchEncoder(table_of("a", "b", "c", "d", "e"))
    table = StringTable()
    assert decode_batch(encoder.encode([rec(0, func=3)]), table).table_delta == [(1, "a"), (2, "b"), (3, "c")]
    assert decode_batch(encoder.encode([rec(1, func=2)]), table).table_delta == []
    assert decode_batch(encoder.encode([rec(2, func=5)]), table).table_delta == [(4, "d"), (5, "e")]
    assert decode_batch(encoder.encode([]), table).records == []


def test_trace_file(tmp_path):
    path = tmp_path / "trace.p2lt"
    records = [rec(i, func=1 + i % 2) for i in range(10)]
    assert write_trace(path, records, table_of("vfs_read", "filemap_read"), batch_records=4) == 10
    loaded, table = read_trace(path)
    assert loaded == records
    assert table.items() == [(1, "vfs_read"), (2, "filemap_read")]


def test_empty_trace_file(tmp_path):
    path = tmp_path / "empty.p2lt"
    write_trace(path, [], StringTable())
    assert path.read_bytes() == b"P2L1" + bytes(8)
    assert read_trace(path) == ([], StringTable())
    path.write_bytes(b"")
    with pytest.raises(WireFormatError):
        read_trace(path)


def test_parse_endpoint():
    assert parse_endpoint("10.0.0.1:7878") == ("10.0.0.1", 7878)
    assert parse_endpoint(":0") == ("127.0.0.1", 0)
    for bad in ("localhost", "host:port"):
        with pytest.raises(ConfigError):
            parse_endpoint(bad)


def serve_in_thread(collector):
    errors = []

    def serve():
        try:
            collector.serve()
        except BaseException as exc:
            errors.append(exc)

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    return thread, errors


def test_loopback_session_matches_offline_trace(tmp_path):
    result = session_trace()
    assert len(result.records) >= 10_000
    out = tmp_path / "collected.p2lt"
    collector = Collector("127.0.0.1:0", out, batch_records=64, timeout=30)
    thread, errors = serve_in_thread(collector)
    stats = agent_run(
        collector.endpoint, make_rings(result.records), result.table, result.records, period=0.01, batch_records=64
    )
    thread.join(30)
    assert not errors
    assert stats.balanced and stats.dropped == 0
    assert stats.records_out == len(result.records)
    assert collector.stats.records == len(result.records)
    assert out.read_bytes() == offline_bytes(result.records, result.table, 64)
    assert not (tmp_path / "collected.p2lt.spool").exists()


class FlakyProxy:
    """Forwards to a collector but cuts its first connection after ``cut_after`` bytes from the agent."""

    def __init__(self, target, cut_after):
        self.target = target
        self.cut_after = cut_after
        self.connections = 0
        self.server = socket.create_server(("127.0.0.1", 0))
        self.endpoint = "127.0.0.1:%d" % self.server.getsockname()[1]
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self):
        while True:
            try:
                conn, _ = self.server.accept()
            except OSError:
                return
            upstream = socket.create_connection(self.target)
            limit = self.cut_after if self.connections == 0 else None
            self.connections += 1
            threading.Thread(target=self._pipe, args=(conn, upstream, limit), daemon=True).start()
            threading.Thread(target=self._pipe, args=(upstream, conn, None), daemon=True).start()

    @staticmethod
    def _pipe(src, dst, limit):
        sent = 0
        try:
            while True:
                data = src.recv(65536)
                if not data:
                    break
                if limit is not None and sent + len(data) >= limit:
                    dst.sendall(data[: limit - sent])
                    break
                dst.sendall(data)
                sent += len(data)
        except OSError:
            pass
        finally:
            for sock in (src, dst):
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                sock.close()

    def close(self):
        self.server.close()


def test_session_survives_a_dropped_connection(tmp_path):
    result = small_trace()
    out = tmp_path / "collected.p2lt"
    collector = Collector("127.0.0.1:0", out, batch_records=32, timeout=30)
    thread, errors = serve_in_thread(collector)
    proxy = FlakyProxy(collector.address, cut_after=200)
    try:
        stats = agent_run(
            proxy.endpoint, make_rings(result.records), result.table, result.records, period=0.01, batch_records=32
        )
        thread.join(30)
    finally:
        proxy.close()
    assert not errors
    assert stats.reconnects >= 1
    assert stats.balanced and stats.dropped == 0
    assert collector.stats.connections >= 2
    assert out.read_bytes() == offline_bytes(result.records, result.table, 32)


def test_agent_gives_up_without_collector():
    probe = socket.create_server(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    ring = RingBuffer(4 * RECORD_SIZE)
    with pytest.raises(TransportError):
        with Agent(
            f"127.0.0.1:{port}",
            {0: ring},
            table_of("vfs_read"),
            period=0.01,
            timeout=0.5,
            connect_tries=1,
            retry_delay=0.01,
            final_attempts=2,
        ):
            ring.push(rec(0))


def test_agent_overflow_keeps_the_books(tmp_path):
    result = session_trace()
    out = tmp_path / "collected.p2lt"
    collector = Collector("127.0.0.1:0", out, batch_records=64, timeout=30)
    thread, errors = serve_in_thread(collector)
    # the agent sleeps through the whole push and only drains once the producer is done
    stats = agent_run(
        collector.endpoint,
        make_rings(result.records, 8 * RECORD_SIZE),
        result.table,
        result.records,
        period=60,
        batch_records=64,
        block_on_full=False,
    )
    thread.join(30)
    assert not errors
    assert stats.records_in == len(result.records)
    assert stats.dropped > 0
    assert stats.records_out + stats.dropped == stats.records_in
    assert collector.stats.records == stats.records_out
    assert len(read_trace(out)[0]) == stats.records_out


def random_record(rng, functions):
    return TraceRecord(
        rng.choice(list(EventKind)),
        rng.randint(1, functions),
        rng.randrange(1 << 32),
        rng.randrange(1 << 32),
        rng.randrange(1 << 16),
        rng.randrange(1 << 64),
        rng.randrange(1 << 64),
        HwSample(rng.randrange(1 << 64), rng.randrange(1 << 64)),
    )


def test_random_records_survive_the_wire():
    rng = random.Random(48)
    delta = [(fid, f"fn_{fid}") for fid in range(1, 41)]
    records = [random_record(rng, len(delta)) for _ in range(1_000)]
    table = StringTable()
    batch = decode_batch(encode_batch(records, delta), table)
    assert batch.records == records
    assert table.items() == delta


def test_ring_behaves_like_a_bounded_queue():
    rng = random.Random(7)
    ring = RingBuffer(5 * RECORD_SIZE + 17)
    model = deque()
    dropped = 0
    for i in range(5_000):
        if rng.random() < 0.6:
            if len(model) < 5:
                model.append(rec(i))
                assert ring.push(rec(i)) is PushResult.ACCEPTED
            else:
                dropped += 1
                assert ring.push(rec(i)) is PushResult.DROPPED
        else:
            limit = rng.choice([None, 1, 2, 3, 7])
            count = len(model) if limit is None else min(limit, len(model))
            assert ring.drain(limit) == [model.popleft() for _ in range(count)]
        assert len(ring) == len(model)
        assert ring.free == ring.capacity - len(model) * RECORD_SIZE
    assert (ring.dropped, ring.records_in) == (dropped, ring.accepted + dropped)
