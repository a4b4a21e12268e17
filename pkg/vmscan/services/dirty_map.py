"""
Dirty block map service for vmscan.

Turns intercepted write records into a per-image boolean array indexed by
block address, where block address = (offset - header_offset) // block_size,
and answers dirty queries with a single array lookup.
"""

import logging
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np

from ..errors import CorruptMapError, GeometryError, MalformedRecordError
from ..models import RECORD_DTYPE, SECTOR_SIZE, ImageGeometry, RecordBatch, WriteRecord

logger = logging.getLogger(__name__)

MAP_MAGIC = b'DBMP'
MAP_VERSION = 1
# magic, version, flags, block_size, total_blocks, dirty_count, header offset in sectors
MAP_HEADER = struct.Struct('<4sHHIQQI')


class DirtyBlockMap:
    """
    Boolean dirty flag per filesystem block of one image.

    A flag is true iff some write overlapped that block since the map was
    created. Marking only ever sets flags.

    Attributes:
        geometry: Block addressing the map was built for
        bits: numpy bool array of geometry.total_blocks entries
        pre_fs_writes: Records that started below the filesystem
        overflow_writes: Records that reached past the last block
    """

    def __init__(self, geometry: ImageGeometry, bits: Optional[np.ndarray] = None):
        geometry.validate()
        self.geometry = geometry
        if bits is None:
            bits = np.zeros(geometry.total_blocks, dtype=bool)
        elif bits.shape != (geometry.total_blocks,):
            raise GeometryError(
                f"Bitmap has {bits.size} entries, geometry needs {geometry.total_blocks}"
            )
        self.bits = bits
        self.pre_fs_writes = 0
        self.overflow_writes = 0

    def __len__(self) -> int:
        return int(self.bits.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DirtyBlockMap):
            return NotImplemented
        return self.geometry == other.geometry and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self) -> str:
        return (f"DirtyBlockMap(blocks={len(self)}, dirty={self.dirty_count}, "
                f"block_size={self.geometry.block_size}, header={self.geometry.header_offset})")

    @property
    def dirty_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def end_offset(self) -> int:
        """Image offset one past the last addressable block."""
        return self.geometry.block_offset(self.geometry.total_blocks)

    def mark_write(self, record: WriteRecord) -> None:
        """
        Mark every block overlapped by one write.

        Writes (or parts of writes) below header_offset are counted in
        pre_fs_writes; parts past the last block are counted in
        overflow_writes. Everything in between is marked.
        """
        header = self.geometry.header_offset
        bs = self.geometry.block_size
        start = record.offset
        end = record.offset + record.length

        if start < header:
            self.pre_fs_writes += 1
            if end <= header:
                return
            start = header

        total = self.geometry.total_blocks
        first = (start - header) // bs
        last = (end - 1 - header) // bs
        if last >= total:
            self.overflow_writes += 1
            logger.debug("Write (%d, %d) extends past the last block", record.offset, record.length)
            if first >= total:
                return
            last = total - 1
        self.bits[first:last + 1] = True

    def mark_batch(self, batch: Union[RecordBatch, np.ndarray]) -> None:
        """
        Mark a whole batch of records at once.

        Equivalent to mark_write on each record: the overlapped block ranges
        are accumulated as +1/-1 boundary counts and flattened with cumsum.

        Raises:
            MalformedRecordError: If a record has zero length
        """
        records = batch.records if isinstance(batch, RecordBatch) else batch
        records = np.asarray(records, dtype=RECORD_DTYPE).reshape(-1, 2)
        if records.size == 0:
            return
        offsets = records[:, 0]
        lengths = records[:, 1]
        if not lengths.all():
            raise MalformedRecordError("Batch contains a zero-length write record")

        header = np.uint64(self.geometry.header_offset)
        bs = np.uint64(self.geometry.block_size)
        total = self.geometry.total_blocks
        limit = np.uint64(self.end_offset)

        beyond = offsets >= limit
        offsets = offsets[~beyond]
        # lengths clipped just past the map end so offset + length stays in range
        ends = offsets + np.minimum(lengths[~beyond], limit + np.uint64(1))

        self.pre_fs_writes += int(np.count_nonzero(offsets < header))
        inside = ends > header
        starts = np.maximum(offsets[inside], header) - header
        ends = ends[inside] - header

        first = (starts // bs).astype(np.int64)
        last = ((ends - np.uint64(1)) // bs).astype(np.int64)
        overflow = last >= total
        self.overflow_writes += int(np.count_nonzero(overflow)) + int(np.count_nonzero(beyond))
        np.minimum(last, total - 1, out=last)

        boundaries = np.bincount(first, minlength=total + 1)
        boundaries -= np.bincount(last + 1, minlength=total + 1)
        self.bits |= np.cumsum(boundaries[:total]) > 0

    def _check_address(self, block_addr: int) -> None:
        if not 0 <= block_addr < self.geometry.total_blocks:
            raise GeometryError(
                f"Block address {block_addr} outside map of {self.geometry.total_blocks} blocks"
            )

    def is_dirty(self, block_addr: int) -> bool:
        """
        Return the stored flag for one block.

        Raises:
            GeometryError: If block_addr is out of range
        """
        self._check_address(block_addr)
        return bool(self.bits[block_addr])

    def first_dirty(self, blocks: Iterable[Optional[int]]) -> Optional[int]:
        """Return the first dirty address in blocks (holes skipped), or None."""
        for block in blocks:
            if block is None:
                continue
            if self.is_dirty(block):
                return block
        return None

    def dirty_among(self, blocks: Iterable[Optional[int]]) -> List[int]:
        """Every dirty address in blocks, in the given order."""
        addresses = np.fromiter((b for b in blocks if b is not None), dtype=np.int64)
        if addresses.size == 0:
            return []
        if addresses.min() < 0 or addresses.max() >= self.geometry.total_blocks:
            raise GeometryError("File block address outside the dirty map")
        return addresses[self.bits[addresses]].tolist()

    def dirty_blocks(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def merge(self, other: 'DirtyBlockMap') -> None:
        """
        OR another map of the same geometry into this one.

        Raises:
            GeometryError: If the geometries differ
        """
        if other.geometry != self.geometry:
            raise GeometryError(
                f"Cannot merge maps with different geometry: {self.geometry} vs {other.geometry}"
            )
        self.bits |= other.bits
        self.pre_fs_writes += other.pre_fs_writes
        self.overflow_writes += other.overflow_writes

    def snapshot(self) -> 'DirtyBlockMap':
        """Read-only copy handed to the scanner."""
        bits = self.bits.copy()
        bits.flags.writeable = False
        snap = DirtyBlockMap(self.geometry, bits)
        snap.pre_fs_writes = self.pre_fs_writes
        snap.overflow_writes = self.overflow_writes
        return snap

    def save(self, path: Union[str, Path]) -> Path:
        """
        Write the map file: 32-byte header followed by the packed bitset.

        Raises:
            GeometryError: If header_offset is not a whole number of sectors
        """
        header_offset = self.geometry.header_offset
        if header_offset % SECTOR_SIZE:
            raise GeometryError(f"Filesystem offset {header_offset} is not sector aligned")
        path = Path(path)
        header = MAP_HEADER.pack(
            MAP_MAGIC, MAP_VERSION, 0,
            self.geometry.block_size,
            self.geometry.total_blocks,
            self.dirty_count,
            header_offset // SECTOR_SIZE,
        )
        tmp = path.with_name(path.name + '.tmp')
        with open(tmp, 'wb') as f:
            f.write(header)
            f.write(np.packbits(self.bits, bitorder='little').tobytes())
        tmp.replace(path)
        logger.info("Saved dirty map %s (%d of %d blocks dirty)", path, self.dirty_count, len(self))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'DirtyBlockMap':
        """
        Read a map file written by save().

        Raises:
            CorruptMapError: If the file is truncated or its header is inconsistent
        """
        path = Path(path)
        data = path.read_bytes()
        if len(data) < MAP_HEADER.size:
            raise CorruptMapError(f"Dirty map {path} is truncated ({len(data)} bytes)")

        magic, version, _flags, block_size, total, dirty, header_sectors = MAP_HEADER.unpack_from(data)
        if magic != MAP_MAGIC:
            raise CorruptMapError(f"{path} is not a dirty map (magic {magic!r})")
        if version != MAP_VERSION:
            raise CorruptMapError(f"Unsupported dirty map version {version} in {path}")

        geometry = ImageGeometry(
            header_offset=header_sectors * SECTOR_SIZE,
            block_size=block_size,
            total_blocks=total,
        )
        try:
            geometry.validate()
        except GeometryError as e:
            raise CorruptMapError(f"Dirty map {path} has invalid geometry: {e}") from e

        body = data[MAP_HEADER.size:]
        if len(body) != (total + 7) // 8:
            raise CorruptMapError(
                f"Dirty map {path} body is {len(body)} bytes, expected {(total + 7) // 8}"
            )
        unpacked = np.unpackbits(np.frombuffer(body, dtype=np.uint8), bitorder='little')
        if unpacked[total:].any():
            raise CorruptMapError(f"Dirty map {path} has bits set past the last block")
        bits = unpacked[:total].astype(bool)
        if int(np.count_nonzero(bits)) != dirty:
            raise CorruptMapError(
                f"Dirty map {path} header reports {dirty} dirty blocks, body has {np.count_nonzero(bits)}"
            )
        return cls(geometry, bits)


def new_map(geometry: ImageGeometry) -> DirtyBlockMap:
    """
    Create an all-clean map.

    Raises:
        GeometryError: If the geometry is invalid (zero blocks, bad block size)
    """
    return DirtyBlockMap(geometry)


def mark_write(dirty_map: DirtyBlockMap, record: WriteRecord) -> None:
    dirty_map.mark_write(record)


def is_dirty(dirty_map: DirtyBlockMap, block_addr: int) -> bool:
    return dirty_map.is_dirty(block_addr)


def save_map(dirty_map: DirtyBlockMap, path: Union[str, Path]) -> Path:
    return dirty_map.save(path)


def load_map(path: Union[str, Path]) -> DirtyBlockMap:
    return DirtyBlockMap.load(path)


def archive_map(path: Union[str, Path], archive_dir: Union[str, Path]) -> Path:
    """
    Move a consumed map into the archive directory, starting a new epoch.

    The archived name carries a UTC timestamp: <stem>-YYYYmmddTHHMMSSZ<suffix>.

    Returns:
        Path of the archived map
    """
    path = Path(path)
    archive_dir = Path(archive_dir)
    archive_dir.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime('%Y%m%dT%H%M%SZ')
    target = archive_dir / f'{path.stem}-{stamp}{path.suffix}'
    counter = 1
    while target.exists():
        target = archive_dir / f'{path.stem}-{stamp}-{counter}{path.suffix}'
        counter += 1
    path.replace(target)
    logger.info("Archived dirty map %s to %s", path, target)
    return target
