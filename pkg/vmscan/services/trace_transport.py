"""
Write-record transport for vmscan.

This module carries intercepted disk writes from a producer (the backend
driver hook, or a trace replayer standing in for it) to a consumer (the
modification recorder). Records accumulate in the producer's native batch;
a full batch moves into a fixed ring of batch slots, or, when every slot is
full, into a spill file written by a background task. The producer never
waits for the consumer.

Wire format (trace files and spill files): header-less concatenation of
16-byte records, offset then length, both little-endian uint64.
"""

import enum
import logging
import os
import re
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, List, Optional, Union

import numpy as np

from ..errors import CorruptSpillError, MalformedRecordError, TransportError
from ..models import RECORD_DTYPE, RECORD_SIZE, RecordBatch, WriteRecord

logger = logging.getLogger(__name__)

DEFAULT_BATCH_CAPACITY = 100_000
DEFAULT_RING_SLOTS = 4

SPILL_NAME = re.compile(r'^spill-(?P<producer>.+)-(?P<seq>\d+)\.bin$')


class SlotState(enum.Enum):
    EMPTY = 'Empty'
    FULL = 'Full'


class FlushKind(enum.Enum):
    NOOP = 'NoOp'
    TO_RING = 'ToRing'
    TO_SPILL = 'ToSpill'


@dataclass(frozen=True)
class FlushOutcome:
    """
    Where a flushed batch went.

    Attributes:
        kind: NoOp (empty batch), ToRing or ToSpill
        slot: Ring slot index for ToRing
        spill_path: Spill file for ToSpill
    """
    kind: FlushKind
    slot: Optional[int] = None
    spill_path: Optional[Path] = None


@dataclass
class TransportStats:
    """Counters shared by a producer/consumer pair."""
    appended: int = 0
    ring_flushes: int = 0
    spill_flushes: int = 0
    drained_batches: int = 0
    drained_records: int = 0
    flush_latencies: List[float] = field(default_factory=list)


class SharedRing:
    """
    Fixed circular queue of batch slots shared by one producer and one consumer.

    The producer fills the tail slot and marks it Full; the consumer empties
    Full slots from the head. Full slots are always contiguous from head to
    tail, so a Full tail slot means the whole ring is full.
    """

    def __init__(self, slots: int = DEFAULT_RING_SLOTS, batch_capacity: int = DEFAULT_BATCH_CAPACITY):
        if slots < 1:
            raise ValueError("ring needs at least one slot")
        self.batch_capacity = batch_capacity
        self._slots: List[Optional[RecordBatch]] = [None] * slots
        self._states: List[SlotState] = [SlotState.EMPTY] * slots
        self._head = 0
        self._tail = 0
        self._lock = threading.Lock()
        self._signal = threading.Event()

    @property
    def slot_count(self) -> int:
        return len(self._slots)

    @property
    def capacity_records(self) -> int:
        return self.slot_count * self.batch_capacity

    def states(self) -> List[SlotState]:
        with self._lock:
            return list(self._states)

    def try_put(self, batch: RecordBatch) -> Optional[int]:
        """
        Place a batch in the tail slot (Empty -> Full).

        Args:
            batch: Batch owned by the ring from now on

        Returns:
            Slot index, or None when the ring is full
        """
        with self._lock:
            index = self._tail
            if self._states[index] is SlotState.FULL:
                return None
            self._slots[index] = batch
            self._states[index] = SlotState.FULL
            self._tail = (index + 1) % len(self._slots)
        self._signal.set()
        return index

    def take_all(self) -> List[RecordBatch]:
        """Remove every Full slot from the head (Full -> Empty)."""
        taken = []
        with self._lock:
            while self._states[self._head] is SlotState.FULL:
                taken.append(self._slots[self._head])
                self._slots[self._head] = None
                self._states[self._head] = SlotState.EMPTY
                self._head = (self._head + 1) % len(self._slots)
        return taken

    def notify(self) -> None:
        self._signal.set()

    def wait(self, timeout: Optional[float]) -> bool:
        """Block the consumer until the producer signals or timeout expires."""
        signalled = self._signal.wait(timeout)
        self._signal.clear()
        return signalled


def spill_file_name(producer_id: str, seq: int) -> str:
    return f'spill-{producer_id}-{seq:010d}.bin'


def _write_spill(path: Path, batch: RecordBatch) -> Path:
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(batch.to_bytes())
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return path


class Producer:
    """
    Producer side of the transport (one per image).

    This class handles:
    - Appending records to the native batch
    - Flushing full batches to the ring, or to a spill file when the ring is full
    - Surfacing spill failures as fatal transport errors
    """

    def __init__(self, ring: SharedRing, spill_dir: Union[str, Path], producer_id: str = 'p0',
                 stats: Optional[TransportStats] = None):
        """
        Initialize the producer.

        Args:
            ring: Ring shared with the consumer
            spill_dir: Directory for spill files (created if missing)
            producer_id: Name used in spill file names
            stats: Counters shared with the consumer (created if not given)
        """
        self.ring = ring
        self.spill_dir = Path(spill_dir)
        self.spill_dir.mkdir(parents=True, exist_ok=True)
        self.producer_id = producer_id
        self.stats = stats if stats is not None else TransportStats()
        self.capacity = ring.batch_capacity
        self._buffer = np.empty((self.capacity, 2), dtype=RECORD_DTYPE)
        self._count = 0
        self._seq = 0
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f'spill-{producer_id}')
        self._failure: Optional[BaseException] = None
        self._closed = False

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    @property
    def pending(self) -> int:
        """Records sitting in the native batch."""
        return self._count

    def _check(self) -> None:
        if self._failure is not None:
            raise TransportError(f"Spill write failed, transport halted: {self._failure}")
        if self._closed:
            raise TransportError("Producer is closed")

    def append(self, offset: int, length: int) -> None:
        """
        Append one write record to the native batch.

        Args:
            offset: Byte offset of the write in the image file
            length: Bytes written

        Raises:
            MalformedRecordError: If length is zero
            TransportError: If a previous spill failed or the producer is closed
        """
        self._check()
        if length <= 0:
            raise MalformedRecordError(f"Write record at offset {offset} has zero length")
        self._buffer[self._count, 0] = offset
        self._buffer[self._count, 1] = length
        self._count += 1
        self.stats.appended += 1
        if self._count == self.capacity:
            self.flush()

    def append_many(self, records: np.ndarray) -> None:
        """
        Append an (n, 2) array of records, flushing every time the batch fills.

        Raises:
            MalformedRecordError: If any record has zero length (nothing is appended)
        """
        self._check()
        records = np.asarray(records, dtype=RECORD_DTYPE).reshape(-1, 2)
        if records.size and not records[:, 1].all():
            raise MalformedRecordError("Trace contains a zero-length write record")
        position = 0
        while position < len(records):
            room = self.capacity - self._count
            chunk = records[position:position + room]
            self._buffer[self._count:self._count + len(chunk)] = chunk
            self._count += len(chunk)
            self.stats.appended += len(chunk)
            position += len(chunk)
            if self._count == self.capacity:
                self.flush()

    def flush(self) -> FlushOutcome:
        """
        Hand the native batch to the consumer without waiting for it.

        Returns:
            FlushOutcome describing where the batch went

        Raises:
            TransportError: If a previous spill failed
        """
        if self._failure is not None:
            self._check()
        if self._count == 0:
            return FlushOutcome(FlushKind.NOOP)

        started = time.perf_counter()
        batch = RecordBatch(seq=self._seq, records=self._buffer[:self._count].copy(),
                            producer_id=self.producer_id)
        self._seq += 1
        self._count = 0

        slot = self.ring.try_put(batch)
        if slot is not None:
            self.stats.ring_flushes += 1
            outcome = FlushOutcome(FlushKind.TO_RING, slot=slot)
        else:
            path = self.spill_dir / spill_file_name(self.producer_id, batch.seq)
            future = self._executor.submit(_write_spill, path, batch)
            future.add_done_callback(self._spill_done)
            self.stats.spill_flushes += 1
            logger.debug("Ring full, spilling batch %d (%d records) to %s", batch.seq, len(batch), path)
            outcome = FlushOutcome(FlushKind.TO_SPILL, spill_path=path)
        self.stats.flush_latencies.append(time.perf_counter() - started)
        return outcome

    def _spill_done(self, future: Future) -> None:
        error = future.exception()
        if error is not None:
            logger.error("Spill write failed: %s", error)
            self._failure = error
        else:
            self.ring.notify()

    def close(self) -> None:
        """
        Flush the partial batch (explicit shutdown) and wait for spill tasks.

        Raises:
            TransportError: If any spill write failed
        """
        if self._closed:
            return
        try:
            self.flush()
        finally:
            self._closed = True
            self._executor.shutdown(wait=True)
        if self._failure is not None:
            raise TransportError(f"Spill write failed, records were not delivered: {self._failure}")


def read_spill_file(path: Union[str, Path]) -> RecordBatch:
    """
    Read one spill file into a batch.

    Raises:
        CorruptSpillError: If the file size is not a multiple of 16 bytes
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) % RECORD_SIZE:
        raise CorruptSpillError(
            f"Spill file {path} is {len(data)} bytes, not a multiple of {RECORD_SIZE}",
            paths=[str(path)],
        )
    match = SPILL_NAME.match(path.name)
    producer_id = match.group('producer') if match else path.stem
    seq = int(match.group('seq')) if match else -1
    return RecordBatch.from_bytes(seq, data, producer_id=producer_id)


class Consumer:
    """
    Consumer side of the transport (the modification recorder's input).
    """

    def __init__(self, ring: SharedRing, spill_dir: Union[str, Path], stats: Optional[TransportStats] = None):
        self.ring = ring
        self.spill_dir = Path(spill_dir)
        self.stats = stats if stats is not None else TransportStats()

    def wait(self, timeout: Optional[float]) -> bool:
        return self.ring.wait(timeout)

    def pending_spill_files(self) -> List[Path]:
        if not self.spill_dir.is_dir():
            return []
        return sorted(p for p in self.spill_dir.iterdir() if SPILL_NAME.match(p.name))

    def drain(self) -> List[RecordBatch]:
        """
        Collect every Full ring slot and every pending spill file.

        Ring slots are marked Empty; spill files are deleted once read. A
        corrupt spill file is renamed to *.corrupt and the remaining sources
        are still drained.

        Returns:
            Drained batches (ordering across ring and spill is not guaranteed)

        Raises:
            CorruptSpillError: After draining everything else, if any spill
                               file was corrupt; the exception carries the
                               good batches in .batches
        """
        batches = self.ring.take_all()
        corrupt: List[str] = []

        for path in self.pending_spill_files():
            try:
                batch = read_spill_file(path)
            except CorruptSpillError:
                quarantine = path.with_name(path.name + '.corrupt')
                os.replace(path, quarantine)
                logger.error("Corrupt spill file %s moved to %s", path, quarantine)
                corrupt.append(str(path))
                continue
            batches.append(batch)
            path.unlink()

        self.stats.drained_batches += len(batches)
        self.stats.drained_records += sum(len(b) for b in batches)
        if batches:
            logger.debug("Drained %d batches", len(batches))

        if corrupt:
            raise CorruptSpillError(
                f"{len(corrupt)} corrupt spill file(s): {', '.join(corrupt)}",
                paths=corrupt,
                batches=batches,
            )
        return batches


@dataclass
class Transport:
    """A producer/consumer pair over one ring and spill directory."""
    ring: SharedRing
    producer: Producer
    consumer: Consumer
    stats: TransportStats

    @classmethod
    def create(cls, spill_dir: Union[str, Path], producer_id: str = 'p0',
               slots: int = DEFAULT_RING_SLOTS, batch_capacity: int = DEFAULT_BATCH_CAPACITY) -> 'Transport':
        stats = TransportStats()
        ring = SharedRing(slots=slots, batch_capacity=batch_capacity)
        producer = Producer(ring, spill_dir, producer_id=producer_id, stats=stats)
        consumer = Consumer(ring, spill_dir, stats=stats)
        return cls(ring=ring, producer=producer, consumer=consumer, stats=stats)


def append(producer: Producer, offset: int, length: int) -> None:
    producer.append(offset, length)


def flush(producer: Producer) -> FlushOutcome:
    return producer.flush()


def drain(consumer: Consumer) -> List[RecordBatch]:
    return consumer.drain()


def read_trace_file(path: Union[str, Path], batch_capacity: int = DEFAULT_BATCH_CAPACITY) -> Iterator[RecordBatch]:
    """
    Read a trace file as batches of at most batch_capacity records.

    Raises:
        CorruptSpillError: If the file size is not a multiple of 16 bytes
    """
    path = Path(path)
    size = path.stat().st_size
    if size % RECORD_SIZE:
        raise CorruptSpillError(
            f"Trace file {path} is {size} bytes, not a multiple of {RECORD_SIZE}",
            paths=[str(path)],
        )
    chunk = batch_capacity * RECORD_SIZE
    with open(path, 'rb') as f:
        seq = 0
        while True:
            data = f.read(chunk)
            if not data:
                break
            yield RecordBatch.from_bytes(seq, data, producer_id=path.stem)
            seq += 1


class TraceFileWriter:
    """Appends write records to a header-less trace file."""

    def __init__(self, path: Union[str, Path], append: bool = False):
        self.path = Path(path)
        self._file: BinaryIO = open(self.path, 'ab' if append else 'wb')
        self.count = 0

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def write(self, offset: int, length: int) -> None:
        self._file.write(WriteRecord(offset, length).pack())
        self.count += 1

    def write_records(self, records: np.ndarray) -> None:
        records = np.asarray(records, dtype=RECORD_DTYPE).reshape(-1, 2)
        self._file.write(records.tobytes())
        self.count += len(records)

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()


class Recorder:
    """
    Consumer loop that drains the transport into a dirty block map.

    The target only needs a mark_batch(batch) method. Marking is monotone,
    so a batch delivered twice leaves the map unchanged.
    """

    def __init__(self, consumer: Consumer, dirty_map, poll_interval: float = 0.1):
        self.consumer = consumer
        self.dirty_map = dirty_map
        self.poll_interval = min(poll_interval, 0.1)
        self.corrupt_files: List[str] = []

    def drain_once(self) -> int:
        """Drain and mark everything pending; returns the number of records marked."""
        try:
            batches = self.consumer.drain()
        except CorruptSpillError as e:
            self.corrupt_files.extend(e.paths)
            batches = e.batches
        for batch in batches:
            self.dirty_map.mark_batch(batch)
        return sum(len(b) for b in batches)

    def run(self, stop: threading.Event) -> None:
        while not stop.is_set():
            self.consumer.wait(self.poll_interval)
            self.drain_once()
        self.drain_once()


def stream_trace(trace_path: Union[str, Path], transport: Transport, dirty_map,
                 poll_interval: float = 0.1) -> Recorder:
    """
    Replay a trace file through the live transport into a dirty map.

    A producer thread feeds the trace through the ring (spilling when it is
    full) while the recorder drains concurrently.

    Args:
        trace_path: Header-less trace file
        transport: Producer/consumer pair to use
        dirty_map: Map receiving the drained batches
        poll_interval: Recorder polling period in seconds

    Returns:
        The recorder, for its corrupt-file list

    Raises:
        CorruptSpillError: If the trace file itself is corrupt
        TransportError: If the producer failed
    """
    recorder = Recorder(transport.consumer, dirty_map, poll_interval=poll_interval)
    stop = threading.Event()
    failures: List[BaseException] = []

    def produce():
        try:
            for batch in read_trace_file(trace_path, transport.ring.batch_capacity):
                transport.producer.append_many(batch.records)
            transport.producer.close()
        except BaseException as e:
            failures.append(e)
        finally:
            stop.set()

    producer_thread = threading.Thread(target=produce, name='trace-producer')
    consumer_thread = threading.Thread(target=recorder.run, args=(stop,), name='recorder')
    consumer_thread.start()
    producer_thread.start()
    producer_thread.join()
    consumer_thread.join()

    if failures:
        raise failures[0]
    logger.info(
        "Streamed %d records (%d ring flushes, %d spills)",
        transport.stats.appended, transport.stats.ring_flushes, transport.stats.spill_flushes,
    )
    return recorder
