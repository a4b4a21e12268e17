"""
Domain models for vmscan.

This module defines the value types shared by the services: intercepted
write records and their batches, block geometry, QCOW2 allocation answers,
guest file references and block maps, scan verdicts and baseline entries.
"""

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .errors import GeometryError, MalformedRecordError


# One record on the wire: offset then length, two little-endian uint64
RECORD_STRUCT = struct.Struct('<QQ')
RECORD_SIZE = RECORD_STRUCT.size
RECORD_DTYPE = np.dtype('<u8')

SECTOR_SIZE = 512


@dataclass(frozen=True)
class WriteRecord:
    """
    One intercepted disk write.

    Attributes:
        offset: Byte offset into the image file
        length: Number of bytes written (always > 0)
    """
    offset: int
    length: int

    def __post_init__(self):
        if self.length <= 0:
            raise MalformedRecordError(
                f"Write record at offset {self.offset} has zero length"
            )
        if self.offset < 0 or self.offset >= 1 << 64 or self.length >= 1 << 64:
            raise MalformedRecordError(
                f"Write record ({self.offset}, {self.length}) does not fit in 64 bits"
            )

    def pack(self) -> bytes:
        """Serialize to the 16-byte wire format."""
        return RECORD_STRUCT.pack(self.offset, self.length)

    @classmethod
    def unpack(cls, data: bytes) -> 'WriteRecord':
        """Deserialize one 16-byte record."""
        offset, length = RECORD_STRUCT.unpack(data)
        return cls(offset, length)


@dataclass
class RecordBatch:
    """
    A batch of write records moved through the transport as one unit.

    Attributes:
        seq: Batch number, monotonically increasing per producer
        records: Array of shape (n, 2), columns offset and length
        producer_id: Name of the producer that filled the batch
    """
    seq: int
    records: np.ndarray
    producer_id: str = 'trace'

    def __len__(self) -> int:
        return int(self.records.shape[0])

    def to_bytes(self) -> bytes:
        """Serialize as concatenated 16-byte records."""
        return np.ascontiguousarray(self.records, dtype=RECORD_DTYPE).tobytes()

    @classmethod
    def from_bytes(cls, seq: int, data: bytes, producer_id: str = 'trace') -> 'RecordBatch':
        """Build a batch from concatenated records; len(data) must be a multiple of 16."""
        records = np.frombuffer(data, dtype=RECORD_DTYPE).reshape(-1, 2)
        return cls(seq=seq, records=records, producer_id=producer_id)

    def iter_records(self) -> Iterator[WriteRecord]:
        for offset, length in self.records.tolist():
            yield WriteRecord(offset, length)


@dataclass(frozen=True)
class ImageGeometry:
    """
    Block addressing of a filesystem inside an image.

    Block address b covers image bytes
    [header_offset + b * block_size, header_offset + (b + 1) * block_size).

    Attributes:
        header_offset: Bytes from image start to filesystem start
        block_size: Block size in bytes (power of two)
        total_blocks: Number of addressable blocks
    """
    header_offset: int
    block_size: int = 4096
    total_blocks: int = 0

    def validate(self) -> None:
        """
        Check the geometry invariants.

        Raises:
            GeometryError: If block_size is not a positive power of two,
                           header_offset is negative or total_blocks is zero
        """
        if self.block_size <= 0 or self.block_size & (self.block_size - 1):
            raise GeometryError(f"Block size must be a power of two, got {self.block_size}")
        if self.header_offset < 0:
            raise GeometryError(f"Negative filesystem offset {self.header_offset}")
        if self.total_blocks <= 0:
            raise GeometryError("Geometry must contain at least one block")

    @classmethod
    def for_image(cls, image_size: int, header_offset: int, block_size: int = 4096) -> 'ImageGeometry':
        """Geometry covering every whole block between header_offset and image_size."""
        total = max(0, (image_size - header_offset) // block_size) if block_size > 0 else 0
        return cls(header_offset=header_offset, block_size=block_size, total_blocks=total)

    def block_of(self, image_offset: int) -> int:
        return (image_offset - self.header_offset) // self.block_size

    def block_offset(self, block: int) -> int:
        return self.header_offset + block * self.block_size

    def blocks_for_range(self, image_offset: int, length: int) -> range:
        """Block addresses overlapped by the byte range [image_offset, image_offset + length)."""
        if length <= 0:
            return range(0)
        first = self.block_of(image_offset)
        last = self.block_of(image_offset + length - 1)
        return range(first, last + 1)


class AllocationKind(enum.Enum):
    IN_OVERLAY = 'InOverlay'
    IN_BACKING = 'InBacking'
    UNALLOCATED = 'Unallocated'


@dataclass(frozen=True)
class Allocation:
    """
    Where a guest offset's data lives in a QCOW2 chain.

    Attributes:
        kind: InOverlay, InBacking or Unallocated
        host_offset: Host file offset of the byte (InOverlay only)
        host_cluster: Cluster-aligned host offset (InOverlay only)
        zero: True for a v3 zero cluster, which reads as zeros but was written
    """
    kind: AllocationKind
    host_offset: Optional[int] = None
    host_cluster: Optional[int] = None
    zero: bool = False

    @property
    def in_overlay(self) -> bool:
        return self.kind is AllocationKind.IN_OVERLAY


class FileKind(enum.Enum):
    REGULAR = 'file'
    DIRECTORY = 'dir'
    SYMLINK = 'symlink'
    OTHER = 'other'


@dataclass(frozen=True)
class InodeRef:
    """
    A guest file's metadata object (EXT inode or NTFS MFT record).

    Attributes:
        inode_no: Inode number, or MFT record number on NTFS
        location: Image byte offset of the on-disk metadata entry
        length: Size of the on-disk metadata entry in bytes
        kind: Regular file, directory, symlink or other
        size: File size in bytes
        mtime: Modification time (parsed, never used for dirty decisions)
        mode: Raw mode bits (EXT) or record flags (NTFS)
    """
    inode_no: int
    location: int
    length: int
    kind: FileKind
    size: int
    mtime: int = 0
    mode: int = 0

    @property
    def is_regular(self) -> bool:
        return self.kind is FileKind.REGULAR

    @property
    def is_dir(self) -> bool:
        return self.kind is FileKind.DIRECTORY


@dataclass
class FileBlockMap:
    """
    A file's identity plus the image blocks holding its content.

    Block addresses use the dirty-map geometry, so they can be looked up in a
    DirtyBlockMap directly. None entries are holes (unmapped blocks).

    Attributes:
        path: Guest path
        inode_no: Inode number (EXT) or MFT record number (NTFS)
        blocks: Ordered block addresses, None for holes
        resident: True when the content lives inside the metadata entry
        size: File size in bytes
        metadata_offset: Image byte offset of the inode / MFT record
        metadata_length: Size in bytes of the inode / MFT record
        geometry: Geometry the block addresses refer to
    """
    path: str
    inode_no: int
    blocks: List[Optional[int]]
    resident: bool
    size: int
    metadata_offset: int
    metadata_length: int
    geometry: ImageGeometry

    def mapped_blocks(self) -> List[int]:
        return [b for b in self.blocks if b is not None]

    def metadata_range(self) -> Tuple[int, int]:
        return self.metadata_offset, self.metadata_length

    def byte_ranges(self) -> List[Tuple[int, int]]:
        """
        Merge the mapped blocks into contiguous image byte ranges.

        Returns:
            List of (image_offset, length) tuples in block order
        """
        ranges: List[Tuple[int, int]] = []
        bs = self.geometry.block_size
        for block in self.blocks:
            if block is None:
                continue
            start = self.geometry.block_offset(block)
            if ranges and ranges[-1][0] + ranges[-1][1] == start:
                ranges[-1] = (ranges[-1][0], ranges[-1][1] + bs)
            else:
                ranges.append((start, bs))
        return ranges


class Verdict(enum.Enum):
    SECURE = 'Secure'
    MODIFIED = 'Modified'
    NEW = 'New'
    DELETED = 'Deleted'
    SCAN_ERROR = 'ScanError'


@dataclass
class ScanResult:
    """
    Per-file scan verdict.

    Attributes:
        path: Guest path
        verdict: Secure, Modified, New, Deleted or ScanError
        evidence: Dirty block addresses (single image) or overlay cluster
                  indexes (multiple image) that triggered the content scan
        sha256: Content hash when the content was read
        reason: Error text for ScanError verdicts
        bytes_read: Content bytes read for this file
    """
    path: str
    verdict: Verdict
    evidence: Tuple[int, ...] = ()
    sha256: Optional[str] = None
    reason: Optional[str] = None
    bytes_read: int = 0

    def to_dict(self) -> dict:
        return {
            'path': self.path,
            'verdict': self.verdict.value,
            'hash': self.sha256,
            'evidence_count': len(self.evidence),
            'evidence': list(self.evidence),
            'reason': self.reason,
            'bytes_read': self.bytes_read,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ScanResult':
        return cls(
            path=data['path'],
            verdict=Verdict(data['verdict']),
            evidence=tuple(data.get('evidence') or ()),
            sha256=data.get('hash'),
            reason=data.get('reason'),
            bytes_read=int(data.get('bytes_read') or 0),
        )


@dataclass(frozen=True)
class BaselineEntry:
    """
    Trusted hash (and optional backup copy) of one protected file.

    Attributes:
        guest_path: Guest path as snapshotted
        sha256: Hex-encoded SHA-256 of the content
        size: Content size in bytes
        backup_relpath: Backup location relative to the db directory
    """
    guest_path: str
    sha256: str
    size: int
    backup_relpath: Optional[str] = None


@dataclass
class Partition:
    """One partition table entry."""
    index: int
    start_offset: int
    size: int
    type_id: str
    scheme: str = 'mbr'
    extra: dict = field(default_factory=dict)
