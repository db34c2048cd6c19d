"""
Moves trace records from the probe emitters to the collector.

Emitters push fixed-width records into one ``RingBuffer`` per cpu. The ``Agent`` drains the rings every period and
ships them as ``WireBatch`` frames over TCP; the ``Collector`` acknowledges each frame, spools it and, when the
session ends, rewrites the session as a canonical trace file. A trace file (``*.p2lt``) is a plain concatenation of
WireBatches, so ``write_trace`` and the collector produce the same bytes for the same records.
"""
import logging
import socket
import struct
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from .profile import ConfigError
from .trace import EventKind, HwSample, InternError, RelayError, StringTable, TraceRecord
from .workers import retry

RECORD = struct.Struct("<BHIIIQQQQx")
RECORD_SIZE = RECORD.size
BATCH_MAGIC = b"P2L1"
SESSION_MAGIC = b"P2LS"
DEFAULT_RING_BYTES = 1024 * 4096
DEFAULT_PERIOD = 0.1
DEFAULT_BATCH_RECORDS = 4096
END_OF_SESSION = 0

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_ENTRY = struct.Struct("<IB")
_HELLO = struct.Struct("<4sQ")
_KINDS = {kind.value: kind for kind in EventKind}


class WireFormatError(RelayError):
    """Raised for bytes that are not a valid batch; ``offset`` is where decoding stopped."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte {offset}")


class TransportError(RelayError):
    """Raised when the agent/collector session cannot be completed."""


def pack_record(rec: TraceRecord) -> bytes:
    return RECORD.pack(
        rec.kind, rec.cpu, rec.pid, rec.tid, rec.func, rec.rid, rec.ts, rec.hw.cycles, rec.hw.instructions
    )


def _unpack(fields: tuple, offset: int) -> TraceRecord:
    kind, cpu, pid, tid, func, rid, ts, cycles, instructions = fields
    try:
        kind = _KINDS[kind]
    except KeyError:
        raise WireFormatError(f"unknown event kind {kind}", offset) from None
    return TraceRecord(kind, func, pid, tid, cpu, rid, ts, HwSample(cycles, instructions))


class PushResult(Enum):
    ACCEPTED = "accepted"
    DROPPED = "dropped"


class RingBuffer:
    """
    Byte ring between one cpu's probe emitters and the agent.

    Records are stored packed, so a 4 MiB ring holds ``capacity // RECORD_SIZE`` of them; records may wrap around
    the end of the buffer. A push that does not fit is rejected and counted, never overwriting unconsumed data.
    """

    def __init__(self, capacity: int = DEFAULT_RING_BYTES):
        if capacity < RECORD_SIZE:
            raise ConfigError(f"Ring capacity {capacity} is smaller than one record ({RECORD_SIZE} bytes)")
        self.capacity = capacity
        self._buffer = bytearray(capacity)
        self.head = 0
        self.tail = 0
        self.used = 0
        self.accepted = 0
        self.dropped = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.used // RECORD_SIZE

    @property
    def free(self) -> int:
        return self.capacity - self.used

    @property
    def records_in(self) -> int:
        return self.accepted + self.dropped

    def offer(self, rec: TraceRecord) -> bool:
        """Stores the record if it fits; a rejection is not counted."""
        data = pack_record(rec)
        with self._lock:
            if self.capacity - self.used < RECORD_SIZE:
                return False
            end = self.tail + RECORD_SIZE
            if end <= self.capacity:
                self._buffer[self.tail : end] = data
            else:
                split = self.capacity - self.tail
                self._buffer[self.tail :] = data[:split]
                self._buffer[: RECORD_SIZE - split] = data[split:]
            self.tail = end % self.capacity
            self.used += RECORD_SIZE
            self.accepted += 1
        return True

    def push(self, rec: TraceRecord) -> PushResult:
        if self.offer(rec):
            return PushResult.ACCEPTED
        with self._lock:
            self.dropped += 1
        return PushResult.DROPPED

    def drain(self, max_records: Optional[int] = None) -> List[TraceRecord]:
        """Removes up to ``max_records`` records (all when None) in FIFO order."""
        with self._lock:
            count = self.used // RECORD_SIZE
            if max_records is not None:
                count = min(count, max_records)
            size = count * RECORD_SIZE
            end = self.head + size
            if end <= self.capacity:
                data = bytes(self._buffer[self.head : end])
            else:
                data = bytes(self._buffer[self.head :]) + bytes(self._buffer[: end - self.capacity])
            self.head = end % self.capacity
            self.used -= size
        return [_unpack(fields, i * RECORD_SIZE) for i, fields in enumerate(RECORD.iter_unpack(data))]


def ring_push(rb: RingBuffer, rec: TraceRecord) -> PushResult:
    return rb.push(rec)


def ring_drain(rb: RingBuffer, max_records: Optional[int] = None) -> List[TraceRecord]:
    return rb.drain(max_records)


@dataclass
class WireBatch:
    table_delta: List[Tuple[int, str]] = field(default_factory=list)
    records: List[TraceRecord] = field(default_factory=list)


def encode_batch(records: Sequence[TraceRecord], table_delta: Iterable[Tuple[int, str]] = ()) -> bytes:
    """
    Encodes one batch.

    Args:
        records: Records in wire order.
        table_delta: (FunctionId, name) pairs the receiver has not seen yet, ascending by id.

    Returns:
        ``P2L1`` + u32 delta count + entries (u32 id, u8 length, UTF-8 name) + u32 record count + 48-byte records.
    """
    table_delta = list(table_delta)
    parts = [BATCH_MAGIC, _U32.pack(len(table_delta))]
    for fid, name in table_delta:
        raw = name.encode("utf-8")
        parts.append(_ENTRY.pack(fid, len(raw)))
        parts.append(raw)
    parts.append(_U32.pack(len(records)))
    base = sum(len(part) for part in parts)
    for i, rec in enumerate(records):
        try:
            parts.append(pack_record(rec))
        except struct.error as exc:
            raise WireFormatError(f"record {i} does not fit the wire format ({exc})", base + i * RECORD_SIZE) from None
    return b"".join(parts)


def _take(fmt: struct.Struct, data: bytes, offset: int, what: str) -> tuple:
    if offset + fmt.size > len(data):
        raise WireFormatError(f"truncated {what}", offset)
    return fmt.unpack_from(data, offset)


def _decode_at(data: bytes, offset: int, table: StringTable) -> Tuple[WireBatch, int]:
    if data[offset : offset + len(BATCH_MAGIC)] != BATCH_MAGIC:
        if len(data) - offset < len(BATCH_MAGIC):
            raise WireFormatError("truncated batch header", offset)
        raise WireFormatError(f"bad magic {bytes(data[offset:offset + 4])!r}", offset)
    offset += len(BATCH_MAGIC)
    (delta_count,) = _take(_U32, data, offset, "string table count")
    offset += _U32.size
    batch = WireBatch()
    for _ in range(delta_count):
        fid, length = _take(_ENTRY, data, offset, "string table entry")
        offset += _ENTRY.size
        if offset + length > len(data):
            raise WireFormatError("truncated function name", offset)
        try:
            name = bytes(data[offset : offset + length]).decode("utf-8")
            if table.lookup(fid) != name:
                table.add(fid, name)
        except (UnicodeDecodeError, InternError) as exc:
            raise WireFormatError(f"bad string table entry {fid}: {exc}", offset) from None
        batch.table_delta.append((fid, name))
        offset += length
    (count,) = _take(_U32, data, offset, "record count")
    offset += _U32.size
    end = offset + count * RECORD_SIZE
    if end > len(data):
        complete = (len(data) - offset) // RECORD_SIZE
        raise WireFormatError(f"truncated record {complete} of {count}", offset + complete * RECORD_SIZE)
    for i, fields in enumerate(RECORD.iter_unpack(data[offset:end])):
        rec = _unpack(fields, offset + i * RECORD_SIZE)
        if rec.func not in table:
            raise WireFormatError(f"unknown function id {rec.func}", offset + i * RECORD_SIZE)
        batch.records.append(rec)
    return batch, end


def decode_batch(data: bytes, table: Optional[StringTable] = None) -> WireBatch:
    """
    Decodes exactly one batch.

    Args:
        data: The encoded batch.
        table: String table accumulated from earlier batches of the same stream; updated with this batch's delta.

    Returns:
        The decoded WireBatch.
    """
    batch, end = _decode_at(data, 0, table if table is not None else StringTable())
    if end != len(data):
        raise WireFormatError(f"{len(data) - end} trailing bytes after batch", end)
    return batch


class BatchEncoder:
    """Encodes a stream of batches, shipping every string table entry once.

    A batch carries the not yet shipped entries up to the largest FunctionId it uses, so deltas stay dense.
    """

    def __init__(self, table: StringTable):
        self.table = table
        self.shipped = 0

    def encode(self, records: Sequence[TraceRecord]) -> bytes:
        largest = max((rec.func for rec in records), default=0)
        delta = []
        if largest > self.shipped:
            delta = [(fid, self.table.name(fid)) for fid in range(self.shipped + 1, largest + 1)]
            self.shipped = largest
        return encode_batch(records, delta)


def iter_batches(
    source: Union[bytes, BinaryIO], table: Optional[StringTable] = None
) -> Iterator[Tuple[int, WireBatch]]:
    """Yields (byte offset, batch) for every batch of a concatenated stream, accumulating the string table."""
    data = source if isinstance(source, (bytes, bytearray, memoryview)) else source.read()
    table = table if table is not None else StringTable()
    offset = 0
    while offset < len(data):
        batch, end = _decode_at(data, offset, table)
        yield offset, batch
        offset = end


class TraceWriter:
    """Writes a canonical trace file: batches of ``batch_records`` records, one empty batch for an empty trace."""

    def __init__(self, stream: BinaryIO, table: StringTable, batch_records: int = DEFAULT_BATCH_RECORDS):
        if batch_records < 1:
            raise ConfigError("batch_records must be at least 1")
        self.stream = stream
        self.encoder = BatchEncoder(table)
        self.batch_records = batch_records
        self.pending: List[TraceRecord] = []
        self.records = 0
        self.batches = 0

    def write(self, records: Iterable[TraceRecord]) -> None:
        for rec in records:
            self.pending.append(rec)
            if len(self.pending) == self.batch_records:
                self._flush()

    def _flush(self) -> None:
        self.stream.write(self.encoder.encode(self.pending))
        self.records += len(self.pending)
        self.batches += 1
        self.pending = []

    def close(self) -> None:
        if self.pending or self.batches == 0:
            self._flush()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()


def write_trace(
    path: Union[str, Path],
    records: Iterable[TraceRecord],
    table: StringTable,
    batch_records: int = DEFAULT_BATCH_RECORDS,
) -> int:
    """Writes records to a trace file and returns the number of records written."""
    with open(path, "wb") as stream, TraceWriter(stream, table, batch_records) as writer:
        writer.write(records)
    logging.info(f"Wrote {writer.records} records in {writer.batches} batches to {path}")
    return writer.records


def read_trace(path: Union[str, Path]) -> Tuple[List[TraceRecord], StringTable]:
    """
    Reads a trace file.

    Returns:
        All records in file order and the string table rebuilt from the batch deltas.
    """
    data = Path(path).read_bytes()
    if not data:
        raise WireFormatError(f"empty trace file {path}", 0)
    table = StringTable()
    records: List[TraceRecord] = []
    batches = 0
    for _, batch in iter_batches(data, table):
        records.extend(batch.records)
        batches += 1
    logging.info(f"Read {len(records)} records in {batches} batches from {path}")
    return records, table


def parse_endpoint(endpoint: Union[str, Tuple[str, int]]) -> Tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"Invalid endpoint {endpoint!r}, expected host:port")
    return host or "127.0.0.1", int(port)


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    data = stream.read(size)
    if len(data) < size:
        raise ConnectionError(f"connection closed after {len(data)} of {size} bytes")
    return data


def _read_batch_bytes(stream: BinaryIO) -> bytes:
    """Reads one encoded batch off a socket stream without decoding its records."""
    header = _read_exact(stream, len(BATCH_MAGIC) + _U32.size)
    if header[: len(BATCH_MAGIC)] != BATCH_MAGIC:
        raise WireFormatError(f"bad magic {header[:4]!r} in frame", 0)
    parts = [header]
    for _ in range(_U32.unpack_from(header, len(BATCH_MAGIC))[0]):
        entry = _read_exact(stream, _ENTRY.size)
        parts.append(entry)
        parts.append(_read_exact(stream, _ENTRY.unpack(entry)[1]))
    count = _read_exact(stream, _U32.size)
    parts.append(count)
    parts.append(_read_exact(stream, _U32.unpack(count)[0] * RECORD_SIZE))
    return b"".join(parts)


@dataclass
class AgentStats:
    records_in: int = 0
    records_out: int = 0
    dropped: int = 0
    batches: int = 0
    reconnects: int = 0

    @property
    def balanced(self) -> bool:
        return self.records_out + self.dropped == self.records_in


class Agent:
    """
    User-level agent: drains the per-cpu rings every ``period`` seconds and ships them to the collector.

    Frames stay queued until the collector acknowledges them and are resent after a reconnect. Rings are drained
    only while connected, so a lost collector shows up as ring drops once the rings fill.
    """

    def __init__(
        self,
        endpoint: Union[str, Tuple[str, int]],
        rings: Dict[int, RingBuffer],
        table: StringTable,
        period: float = DEFAULT_PERIOD,
        batch_records: int = DEFAULT_BATCH_RECORDS,
        timeout: float = 5.0,
        connect_tries: int = 3,
        retry_delay: float = 0.05,
        final_attempts: int = 20,
    ):
        self.address = parse_endpoint(endpoint)
        self.rings = rings
        self.encoder = BatchEncoder(table)
        self.period = period
        self.batch_records = batch_records
        self.timeout = timeout
        self.connect_tries = connect_tries
        self.retry_delay = retry_delay
        self.final_attempts = final_attempts
        self.session_id = uuid.uuid4().int & ((1 << 64) - 1)
        self.stats = AgentStats()
        self._sock: Optional[socket.socket] = None
        self._connected_once = False
        self._seq = 0
        self._unacked: List[Tuple[int, int, bytes]] = []
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._error: Optional[BaseException] = None

    def start(self) -> "Agent":
        self._thread = threading.Thread(target=self._run, name="relay-agent", daemon=True)
        self._thread.start()
        return self

    def close(self) -> AgentStats:
        """Stops draining, ships what is left, ends the session and returns the final counters."""
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        if self._error is not None:
            raise self._error
        return self.stats

    def __enter__(self) -> "Agent":
        return self.start()

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self._stop.set()

    def _run(self) -> None:
        try:
            while not self._stop.is_set():
                self._cycle()
                self._stop.wait(self.period)
            attempts = 0
            while not self._cycle():
                attempts += 1
                if attempts >= self.final_attempts:
                    raise TransportError(f"Could not deliver the session to {self.address} after {attempts} attempts")
                time.sleep(self.retry_delay)
            self._end_session()
        except BaseException as exc:  # surfaced to the caller in close()
            self._error = exc
        finally:
            self._disconnect()
            self._update_counts()

    def _update_counts(self) -> None:
        self.stats.records_in = sum(ring.records_in for ring in self.rings.values())
        self.stats.dropped = sum(ring.dropped for ring in self.rings.values())

    def _connect(self) -> bool:
        if self._sock is not None:
            return True
        try:
            sock = retry(
                socket.create_connection,
                self.address,
                self.timeout,
                tries=self.connect_tries,
                delay=self.retry_delay,
                exceptions=(OSError,),
            )
            sock.settimeout(self.timeout)
            sock.sendall(_HELLO.pack(SESSION_MAGIC, self.session_id))
        except OSError as exc:
            logging.warning(f"Collector {self.address} unreachable: {exc}")
            return False
        self._sock = sock
        if self._connected_once:
            self.stats.reconnects += 1
            logging.warning(f"Reconnected to collector {self.address}, resending {len(self._unacked)} frames")
        self._connected_once = True
        return True

    def _disconnect(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def _send(self, seq: int, frame: bytes) -> None:
        self._sock.sendall(frame)
        (ack,) = _U64.unpack(_read_exact_socket(self._sock, _U64.size))
        if ack != seq:
            raise TransportError(f"Collector acknowledged {ack}, expected {seq}")

    def _cycle(self) -> bool:
        """One drain period. Returns True once everything pushed so far has been acknowledged."""
        if not self._connect():
            return False
        try:
            while self._unacked:
                seq, count, frame = self._unacked[0]
                self._send(seq, frame)
                self._unacked.pop(0)
                self.stats.records_out += count
            for cpu in sorted(self.rings):
                ring = self.rings[cpu]
                while len(ring):
                    records = ring.drain(self.batch_records)
                    self._seq += 1
                    frame = _U64.pack(self._seq) + self.encoder.encode(records)
                    self._unacked.append((self._seq, len(records), frame))
                    self.stats.batches += 1
                    self._send(self._seq, frame)
                    self._unacked.pop(0)
                    self.stats.records_out += len(records)
        except (OSError, ConnectionError) as exc:
            logging.warning(f"Lost collector connection: {exc}")
            self._disconnect()
            return False
        finally:
            self._update_counts()
        logging.debug(f"Agent shipped {self.stats.records_out} records in {self.stats.batches} batches")
        return True

    def _end_session(self) -> None:
        try:
            self._send(END_OF_SESSION, _U64.pack(END_OF_SESSION))
        except (OSError, ConnectionError) as exc:
            raise TransportError(f"Collector {self.address} did not confirm the end of the session: {exc}") from exc
        logging.info(
            f"Agent session done: {self.stats.records_out} records out, {self.stats.batches} batches, "
            f"{self.stats.reconnects} reconnects"
        )


def _read_exact_socket(sock: socket.socket, size: int) -> bytes:
    data = b""
    while len(data) < size:
        chunk = sock.recv(size - len(data))
        if not chunk:
            raise ConnectionError("collector closed the connection")
        data += chunk
    return data


def agent_run(
    endpoint: Union[str, Tuple[str, int]],
    rings: Dict[int, RingBuffer],
    table: StringTable,
    records: Iterable[TraceRecord],
    period: float = DEFAULT_PERIOD,
    batch_records: int = DEFAULT_BATCH_RECORDS,
    block_on_full: bool = True,
) -> AgentStats:
    """
    Replays records through the rings and an agent session to the collector at ``endpoint``.

    Args:
        endpoint: ``host:port`` of a listening collector.
        rings: One ring per cpu.
        table: String table of the records.
        records: The records, pushed to the ring of their cpu in order.
        period: Drain period in seconds.
        batch_records: Largest number of records in one frame.
        block_on_full: Wait for the agent instead of dropping when a ring is full.

    Returns:
        The agent's counters; ``records_out + dropped == records_in`` holds.
    """
    with Agent(endpoint, rings, table, period=period, batch_records=batch_records) as agent:
        stream_records(records, rings, block_on_full=block_on_full)
    return agent.stats


def stream_records(
    records: Iterable[TraceRecord], rings: Dict[int, RingBuffer], block_on_full: bool = False, poll: float = 0.001
) -> int:
    """Producer side: pushes each record into its cpu's ring. Returns the number of records offered."""
    count = 0
    for rec in records:
        ring = rings[rec.cpu]
        if block_on_full:
            while not ring.offer(rec):
                time.sleep(poll)
        else:
            ring.push(rec)
        count += 1
    return count


def make_rings(records: Sequence[TraceRecord], capacity: int = DEFAULT_RING_BYTES) -> Dict[int, RingBuffer]:
    return {cpu: RingBuffer(capacity) for cpu in sorted({rec.cpu for rec in records})}


@dataclass
class CollectorStats:
    records: int = 0
    batches: int = 0
    duplicates: int = 0
    connections: int = 0


class Collector:
    """
    Receives one agent session and persists it.

    Committed frames are appended to a spool file next to the output. When the end frame arrives, the spooled
    records are merged into canonical (ts, cpu) order and written with ``TraceWriter``.
    """

    def __init__(
        self,
        endpoint: Union[str, Tuple[str, int]],
        out_path: Union[str, Path],
        batch_records: int = DEFAULT_BATCH_RECORDS,
        timeout: Optional[float] = None,
    ):
        self.out_path = Path(out_path)
        self.batch_records = batch_records
        self.stats = CollectorStats()
        self._server = socket.create_server(parse_endpoint(endpoint))
        self._server.settimeout(timeout)
        self.address: Tuple[str, int] = self._server.getsockname()[:2]
        self._session: Optional[int] = None
        self._committed = 0
        self._table = StringTable()

    @property
    def endpoint(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    def close(self) -> None:
        self._server.close()

    def serve(self) -> CollectorStats:
        spool_path = self.out_path.with_name(self.out_path.name + ".spool")
        logging.info(f"Collector listening on {self.endpoint}, writing {self.out_path}")
        try:
            with open(spool_path, "wb") as spool:
                done = False
                while not done:
                    try:
                        conn, peer = self._server.accept()
                    except socket.timeout:
                        raise TransportError(f"No agent finished a session on {self.endpoint}") from None
                    self.stats.connections += 1
                    logging.debug(f"Agent connected from {peer}")
                    try:
                        with conn, conn.makefile("rb") as stream:
                            done = self._session_frames(conn, stream, spool)
                    except (OSError, ConnectionError) as exc:
                        logging.warning(f"Agent connection lost after frame {self._committed}: {exc}")
            self._finish(spool_path)
        finally:
            spool_path.unlink(missing_ok=True)
            self.close()
        return self.stats

    def _session_frames(self, conn: socket.socket, stream: BinaryIO, spool: BinaryIO) -> bool:
        magic, session = _HELLO.unpack(_read_exact(stream, _HELLO.size))
        if magic != SESSION_MAGIC:
            raise TransportError(f"Bad session magic {magic!r}")
        if self._session is None:
            self._session = session
        elif session != self._session:
            raise TransportError(f"Session {session:x} does not continue session {self._session:x}")
        while True:
            (seq,) = _U64.unpack(_read_exact(stream, _U64.size))
            if seq == END_OF_SESSION:
                conn.sendall(_U64.pack(END_OF_SESSION))
                return True
            raw = _read_batch_bytes(stream)
            if seq <= self._committed:
                self.stats.duplicates += 1
            elif seq == self._committed + 1:
                batch = decode_batch(raw, self._table)
                spool.write(raw)
                spool.flush()
                self._committed = seq
                self.stats.records += len(batch.records)
                self.stats.batches += 1
            else:
                raise TransportError(f"Frame {seq} skips frames after {self._committed}")
            conn.sendall(_U64.pack(seq))

    def _finish(self, spool_path: Path) -> None:
        records: List[TraceRecord] = []
        table = StringTable()
        for _, batch in iter_batches(spool_path.read_bytes(), table):
            records.extend(batch.records)
        records.sort(key=lambda rec: (rec.ts, rec.cpu))
        write_trace(self.out_path, records, table, self.batch_records)
        logging.info(
            f"Collector stored {self.stats.records} records from {self.stats.batches} frames, "
            f"{self.stats.duplicates} duplicates ignored, {self.stats.connections} connections"
        )


def collector_serve(
    endpoint: Union[str, Tuple[str, int]],
    out_path: Union[str, Path],
    batch_records: int = DEFAULT_BATCH_RECORDS,
    timeout: Optional[float] = None,
) -> CollectorStats:
    """Listens on ``endpoint`` until one agent session completes and writes it to ``out_path``."""
    return Collector(endpoint, out_path, batch_records, timeout).serve()
