"""
Disk image access for vmscan.

Opens RAW and QCOW2 (v2/v3) images, follows QCOW2 backing chains, maps guest
offsets to host data through the L1/L2 tables and answers whether a guest
range has been allocated in the top overlay. Also reads MBR and GPT
partition tables to find where the guest filesystem starts.
"""

import logging
import os
import struct
import threading
import uuid
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from ..errors import (
    BadMagicError,
    ImageError,
    ImageIOError,
    UnsupportedFeatureError,
    WrongModeError,
)
from ..models import SECTOR_SIZE, Allocation, AllocationKind, Partition

logger = logging.getLogger(__name__)

BIG_ENDIAN = '>'
LITTLE_ENDIAN = '<'


class Struct:
    """struct.Struct with named fields, unpacking to a dict."""

    def __init__(self, fields, byte_order=BIG_ENDIAN):
        self.keys = [key for key, _ in fields]
        self.struct = struct.Struct(byte_order + ''.join(code for _, code in fields))

    @property
    def size(self) -> int:
        return self.struct.size

    def unpack(self, data: bytes, offset: int = 0) -> dict:
        values = self.struct.unpack_from(data, offset)
        return dict(zip(self.keys, values))

    def pack(self, **values) -> bytes:
        return self.struct.pack(*(values[key] for key in self.keys))


QCOW2_MAGIC = b'QFI\xfb'

QCOW2_HEADER_V2 = Struct([
    ('magic', '4s'),
    ('version', 'I'),
    ('backing_file_offset', 'Q'),
    ('backing_file_size', 'I'),
    ('cluster_bits', 'I'),
    ('size', 'Q'),
    ('crypt_method', 'I'),
    ('l1_size', 'I'),
    ('l1_table_offset', 'Q'),
    ('refcount_table_offset', 'Q'),
    ('refcount_table_clusters', 'I'),
    ('nb_snapshots', 'I'),
    ('snapshots_offset', 'Q'),
])

QCOW2_HEADER_V3 = Struct([
    ('incompatible_features', 'Q'),
    ('compatible_features', 'Q'),
    ('autoclear_features', 'Q'),
    ('refcount_order', 'I'),
    ('header_length', 'I'),
])

QCOW2_EXTENSION = Struct([
    ('type', 'I'),
    ('length', 'I'),
])

QCOW2_V2_HEADER_LENGTH = QCOW2_HEADER_V2.size
QCOW2_V3_HEADER_LENGTH = QCOW2_HEADER_V2.size + QCOW2_HEADER_V3.size
QCOW2_COMPRESSION_TYPE_OFFSET = 104

# Incompatible feature bits
INCOMPAT_DIRTY = 1 << 0
INCOMPAT_CORRUPT = 1 << 1
INCOMPAT_DATA_FILE = 1 << 2
INCOMPAT_COMPRESSION = 1 << 3
INCOMPAT_EXTL2 = 1 << 4

# Header extension types
EXT_END = 0x00000000
EXT_BACKING_FORMAT = 0xE2792ACA
EXT_DATA_FILE = 0x44415441

# L1/L2 entry layout
L1E_OFFSET_MASK = 0x00FFFFFFFFFFFE00
L2E_OFFSET_MASK = 0x00FFFFFFFFFFFE00
QCOW_OFLAG_COPIED = 1 << 63
QCOW_OFLAG_COMPRESSED = 1 << 62
QCOW_OFLAG_ZERO = 1 << 0

MIN_CLUSTER_BITS = 9
MAX_CLUSTER_BITS = 21
MAX_CHAIN_DEPTH = 8

# MBR / GPT
MBR_SIGNATURE = b'\x55\xaa'
MBR_TABLE_OFFSET = 446
MBR_ENTRY = Struct([
    ('status', 'B'),
    ('chs_first', '3s'),
    ('type', 'B'),
    ('chs_last', '3s'),
    ('lba_start', 'I'),
    ('sectors', 'I'),
], byte_order=LITTLE_ENDIAN)
MBR_EXTENDED_TYPES = (0x05, 0x0F, 0x85)
MBR_GPT_PROTECTIVE = 0xEE

GPT_SIGNATURE = b'EFI PART'
GPT_HEADER = Struct([
    ('signature', '8s'),
    ('revision', 'I'),
    ('header_size', 'I'),
    ('header_crc', 'I'),
    ('reserved', 'I'),
    ('current_lba', 'Q'),
    ('backup_lba', 'Q'),
    ('first_usable_lba', 'Q'),
    ('last_usable_lba', 'Q'),
    ('disk_guid', '16s'),
    ('entries_lba', 'Q'),
    ('num_entries', 'I'),
    ('entry_size', 'I'),
    ('entries_crc', 'I'),
], byte_order=LITTLE_ENDIAN)
GPT_ENTRY = Struct([
    ('type_guid', '16s'),
    ('unique_guid', '16s'),
    ('first_lba', 'Q'),
    ('last_lba', 'Q'),
    ('attributes', 'Q'),
    ('name', '72s'),
], byte_order=LITTLE_ENDIAN)
GPT_MAX_ENTRIES = 1024

# OEM ids of boot sectors that start a bare (unpartitioned) filesystem
BARE_FS_OEM_IDS = (b'NTFS    ', b'EXFAT   ', b'MSDOS5.0', b'MSWIN4.1', b'mkfs.fat', b'FRDOS5.1')


class ImageHandle:
    """
    Base class for opened disk images.

    Attributes:
        path: Image file path
        format: 'raw' or 'qcow2'
        virtual_size: Guest-visible size in bytes
        backing: Backing image (QCOW2 only)
        writable: True when opened for remediation writes
        bytes_read: Host bytes read from this layer (instrumented counter)
    """

    format = 'raw'

    def __init__(self, path: Union[str, Path], writable: bool = False):
        self.path = Path(path)
        self.writable = writable
        self.backing: Optional['ImageHandle'] = None
        self.bytes_read = 0
        self._lock = threading.Lock()
        try:
            self._file = open(self.path, 'r+b' if writable else 'rb')
        except OSError as e:
            raise ImageIOError(f"Cannot open image: {e}", layer=str(self.path)) from e
        self.virtual_size = 0

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def __repr__(self) -> str:
        return f"{type(self).__name__}({str(self.path)!r}, virtual_size={self.virtual_size})"

    @property
    def has_backing(self) -> bool:
        return self.backing is not None

    def chain(self) -> List['ImageHandle']:
        """This image followed by its backing images, top-down."""
        layers = []
        layer: Optional[ImageHandle] = self
        while layer is not None:
            layers.append(layer)
            layer = layer.backing
        return layers

    @property
    def total_bytes_read(self) -> int:
        """Host bytes read across the whole backing chain."""
        return sum(layer.bytes_read for layer in self.chain())

    def close(self) -> None:
        for layer in self.chain():
            if not layer._file.closed:
                layer._file.close()

    def _read_host(self, offset: int, length: int) -> bytes:
        with self._lock:
            try:
                self._file.seek(offset)
                data = self._file.read(length)
            except OSError as e:
                raise ImageIOError(f"Read of {length} bytes at {offset} failed: {e}",
                                   layer=str(self.path)) from e
        if len(data) < length:
            # files may be shorter than their last allocation; the tail reads as zeros
            data += bytes(length - len(data))
        self.bytes_read += length
        return data

    def _check_range(self, guest_offset: int, length: int) -> None:
        if guest_offset < 0 or length < 0 or guest_offset + length > self.virtual_size:
            raise ImageError(
                f"Range [{guest_offset}, {guest_offset + length}) outside virtual size "
                f"{self.virtual_size} of {self.path}"
            )

    def read_guest(self, guest_offset: int, length: int) -> bytes:
        raise NotImplementedError

    def write_guest(self, guest_offset: int, data: bytes) -> None:
        raise UnsupportedFeatureError(f"Writing {self.format} images is not supported")

    def lookup_cluster(self, guest_offset: int) -> Allocation:
        raise WrongModeError(f"{self.path} is a {self.format} image and has no cluster tables")

    def allocated_in_overlay(self, guest_offset: int, length: int) -> bool:
        raise WrongModeError(f"{self.path} is not a QCOW2 overlay with a backing image")

    def overlay_clusters(self, guest_offset: int, length: int) -> List[int]:
        raise WrongModeError(f"{self.path} is not a QCOW2 overlay with a backing image")


class RawImage(ImageHandle):
    """Flat byte-for-byte image: guest offset X is file offset X."""

    format = 'raw'

    def __init__(self, path: Union[str, Path], writable: bool = False):
        super().__init__(path, writable)
        self.virtual_size = os.fstat(self._file.fileno()).st_size

    def read_guest(self, guest_offset: int, length: int) -> bytes:
        self._check_range(guest_offset, length)
        if length == 0:
            return b''
        return self._read_host(guest_offset, length)

    def write_guest(self, guest_offset: int, data: bytes) -> None:
        """
        Overwrite image bytes in place (remediation and workload replay).

        Raises:
            UnsupportedFeatureError: If the image was opened read-only
            ImageIOError: If the write fails
        """
        if not self.writable:
            raise UnsupportedFeatureError(f"{self.path} was opened read-only")
        self._check_range(guest_offset, len(data))
        with self._lock:
            try:
                self._file.seek(guest_offset)
                self._file.write(data)
                self._file.flush()
                os.fsync(self._file.fileno())
            except OSError as e:
                raise ImageIOError(f"Write at {guest_offset} failed: {e}", layer=str(self.path)) from e


class Qcow2Image(ImageHandle):
    """
    QCOW2 v2/v3 image with an optional backing chain.

    Attributes:
        header: Parsed header fields
        cluster_bits: log2 of the cluster size
        cluster_size: Cluster size in bytes
        l2_bits: log2 of the number of entries per L2 table
        l1_table: L1 table as a numpy uint64 array
        backing_file: Backing file name as stored in the header
    """

    format = 'qcow2'

    def __init__(self, path: Union[str, Path], depth: int = 0, _seen: Optional[set] = None):
        super().__init__(path, writable=False)
        try:
            self._parse_header()
            self._open_backing(depth, _seen or set())
        except Exception:
            self.close()
            raise

    def _parse_header(self) -> None:
        head = self._read_host(0, 4096)
        header = QCOW2_HEADER_V2.unpack(head)
        if header['magic'] != QCOW2_MAGIC:
            raise BadMagicError(f"{self.path} is not a QCOW2 image (magic {header['magic']!r})")
        version = header['version']
        if version not in (2, 3):
            raise UnsupportedFeatureError(f"QCOW version {version} is not supported (only 2 and 3)")

        header.update({
            'incompatible_features': 0,
            'compatible_features': 0,
            'autoclear_features': 0,
            'refcount_order': 4,
            'header_length': QCOW2_V2_HEADER_LENGTH,
            'compression_type': 0,
        })
        if version == 3:
            header.update(QCOW2_HEADER_V3.unpack(head, QCOW2_V2_HEADER_LENGTH))
            if header['header_length'] > QCOW2_COMPRESSION_TYPE_OFFSET:
                header['compression_type'] = head[QCOW2_COMPRESSION_TYPE_OFFSET]
        self.header = header
        self.version = version

        cluster_bits = header['cluster_bits']
        if not MIN_CLUSTER_BITS <= cluster_bits <= MAX_CLUSTER_BITS:
            raise UnsupportedFeatureError(f"Invalid cluster_bits {cluster_bits} in {self.path}")
        if header['crypt_method'] != 0:
            raise UnsupportedFeatureError(f"{self.path} is encrypted (crypt_method {header['crypt_method']})")
        if header['nb_snapshots'] != 0:
            raise UnsupportedFeatureError(f"{self.path} has {header['nb_snapshots']} internal snapshots")

        incompatible = header['incompatible_features']
        if incompatible & INCOMPAT_CORRUPT:
            raise UnsupportedFeatureError(f"{self.path} is marked corrupt")
        if incompatible & INCOMPAT_DATA_FILE:
            raise UnsupportedFeatureError(f"{self.path} uses an external data file")
        if incompatible & INCOMPAT_COMPRESSION or header['compression_type'] != 0:
            raise UnsupportedFeatureError(f"{self.path} uses a non-zlib compression type")
        if incompatible & INCOMPAT_EXTL2:
            raise UnsupportedFeatureError(f"{self.path} uses extended L2 entries")
        unknown = incompatible & ~(INCOMPAT_DIRTY | INCOMPAT_CORRUPT | INCOMPAT_DATA_FILE
                                   | INCOMPAT_COMPRESSION | INCOMPAT_EXTL2)
        if unknown:
            raise UnsupportedFeatureError(f"{self.path} has unknown incompatible features 0x{unknown:x}")
        if incompatible & INCOMPAT_DIRTY:
            logger.info("%s has the dirty bit set; refcounts are not used", self.path)

        self.cluster_bits = cluster_bits
        self.cluster_size = 1 << cluster_bits
        self.l2_bits = cluster_bits - 3
        self.l2_entries = 1 << self.l2_bits
        self.virtual_size = header['size']

        self.backing_file: Optional[str] = None
        if header['backing_file_offset']:
            raw_name = self._read_host(header['backing_file_offset'], header['backing_file_size'])
            self.backing_file = raw_name.decode('utf-8')
        self.backing_format = self._read_extensions(head, header['header_length'])

        l1_size = header['l1_size']
        needed = -(-self.virtual_size // (self.cluster_size * self.l2_entries))
        if l1_size < needed:
            raise ImageError(f"L1 table of {self.path} has {l1_size} entries, needs {needed}")
        if l1_size:
            raw_l1 = self._read_host(header['l1_table_offset'], l1_size * 8)
            self.l1_table = np.frombuffer(raw_l1, dtype='>u8').astype(np.uint64)
        else:
            self.l1_table = np.zeros(0, dtype=np.uint64)
        self._l2_cache: Dict[int, np.ndarray] = {}

    def _read_extensions(self, head: bytes, offset: int) -> Optional[str]:
        """Walk header extensions; returns the backing format if recorded."""
        backing_format = None
        limit = self.cluster_size if self.header['backing_file_offset'] == 0 \
            else self.header['backing_file_offset']
        limit = min(limit, len(head))
        while offset + QCOW2_EXTENSION.size <= limit:
            ext = QCOW2_EXTENSION.unpack(head, offset)
            offset += QCOW2_EXTENSION.size
            if ext['type'] == EXT_END:
                break
            data = head[offset:offset + ext['length']]
            if ext['type'] == EXT_BACKING_FORMAT:
                backing_format = data.decode('ascii', errors='replace')
            elif ext['type'] == EXT_DATA_FILE:
                raise UnsupportedFeatureError(f"{self.path} names an external data file")
            offset += (ext['length'] + 7) & ~7
        return backing_format

    def _open_backing(self, depth: int, seen: set) -> None:
        seen.add(os.path.realpath(self.path))
        if not self.backing_file:
            return
        if depth + 1 >= MAX_CHAIN_DEPTH:
            raise UnsupportedFeatureError(
                f"Backing chain of {self.path} is deeper than {MAX_CHAIN_DEPTH} images"
            )
        backing_path = Path(self.backing_file)
        if not backing_path.is_absolute():
            backing_path = self.path.parent / backing_path
        if os.path.realpath(backing_path) in seen:
            raise ImageError(f"Backing chain of {self.path} loops through {backing_path}")
        logger.debug("%s: opening backing image %s", self.path, backing_path)
        self.backing = open_image(backing_path, image_format=self.backing_format,
                                  _depth=depth + 1, _seen=seen)

    def _l2_table(self, l2_offset: int) -> np.ndarray:
        table = self._l2_cache.get(l2_offset)
        if table is None:
            raw = self._read_host(l2_offset, self.l2_entries * 8)
            table = np.frombuffer(raw, dtype='>u8').astype(np.uint64)
            self._l2_cache[l2_offset] = table
        return table

    def _not_in_overlay(self) -> Allocation:
        if self.backing is not None:
            return Allocation(AllocationKind.IN_BACKING)
        return Allocation(AllocationKind.UNALLOCATED)

    def lookup_cluster(self, guest_offset: int) -> Allocation:
        """
        Resolve a guest offset through the L1 and L2 tables.

        Raises:
            ImageError: If guest_offset is beyond the virtual size
            UnsupportedFeatureError: If the cluster is compressed
        """
        if not 0 <= guest_offset < self.virtual_size:
            raise ImageError(f"Guest offset {guest_offset} beyond virtual size {self.virtual_size}")
        l1_index = guest_offset >> (self.cluster_bits + self.l2_bits)
        l2_index = (guest_offset >> self.cluster_bits) & (self.l2_entries - 1)

        l2_offset = int(self.l1_table[l1_index]) & L1E_OFFSET_MASK
        if l2_offset == 0:
            return self._not_in_overlay()

        entry = int(self._l2_table(l2_offset)[l2_index])
        if entry & QCOW_OFLAG_COMPRESSED:
            raise UnsupportedFeatureError(f"Compressed cluster at guest offset {guest_offset} in {self.path}")
        host_cluster = entry & L2E_OFFSET_MASK
        if self.version >= 3 and entry & QCOW_OFLAG_ZERO:
            return Allocation(AllocationKind.IN_OVERLAY, host_cluster=host_cluster or None, zero=True)
        if host_cluster == 0:
            return self._not_in_overlay()
        intra = guest_offset & (self.cluster_size - 1)
        return Allocation(AllocationKind.IN_OVERLAY, host_offset=host_cluster + intra,
                          host_cluster=host_cluster)

    def read_guest(self, guest_offset: int, length: int) -> bytes:
        """
        Read guest bytes cluster by cluster through the backing chain.

        Raises:
            ImageError: If the range is outside the virtual size
            ImageIOError: If a layer cannot be read
        """
        self._check_range(guest_offset, length)
        parts = []
        position = guest_offset
        end = guest_offset + length
        while position < end:
            intra = position & (self.cluster_size - 1)
            chunk = min(end - position, self.cluster_size - intra)
            allocation = self.lookup_cluster(position)
            if allocation.in_overlay:
                if allocation.zero:
                    parts.append(bytes(chunk))
                else:
                    parts.append(self._read_host(allocation.host_offset, chunk))
            elif allocation.kind is AllocationKind.IN_BACKING:
                parts.append(self._read_backing(position, chunk))
            else:
                parts.append(bytes(chunk))
            position += chunk
        return b''.join(parts)

    def _read_backing(self, guest_offset: int, length: int) -> bytes:
        available = max(0, min(length, self.backing.virtual_size - guest_offset))
        data = self.backing.read_guest(guest_offset, available) if available else b''
        return data + bytes(length - available)

    def _require_overlay(self) -> None:
        if self.backing is None:
            raise WrongModeError(f"{self.path} has no backing image; overlay analysis needs one")

    def overlay_clusters(self, guest_offset: int, length: int) -> List[int]:
        """Guest cluster indexes in the range that are allocated in this overlay."""
        self._require_overlay()
        if length <= 0:
            return []
        self._check_range(guest_offset, length)
        first = guest_offset >> self.cluster_bits
        last = (guest_offset + length - 1) >> self.cluster_bits
        return [c for c in range(first, last + 1) if self.lookup_cluster(c << self.cluster_bits).in_overlay]

    def allocated_in_overlay(self, guest_offset: int, length: int) -> bool:
        """
        True iff any cluster overlapping the range is allocated in this overlay.

        Raises:
            WrongModeError: If the image has no backing image
        """
        self._require_overlay()
        if length <= 0:
            return False
        self._check_range(guest_offset, length)
        first = guest_offset >> self.cluster_bits
        last = (guest_offset + length - 1) >> self.cluster_bits
        for cluster in range(first, last + 1):
            if self.lookup_cluster(cluster << self.cluster_bits).in_overlay:
                return True
        return False


def open_image(path: Union[str, Path], writable: bool = False, image_format: Optional[str] = None,
               _depth: int = 0, _seen: Optional[set] = None) -> ImageHandle:
    """
    Open a RAW or QCOW2 image.

    Args:
        path: Image file
        writable: Open for in-place writes (RAW only)
        image_format: 'raw', 'qcow2' or None to detect from the magic

    Returns:
        ImageHandle (RawImage or Qcow2Image)

    Raises:
        BadMagicError: If image_format is 'qcow2' and the magic is wrong
        UnsupportedFeatureError: For QCOW features we refuse to misread, or a
                                 writable QCOW2 open
        ImageIOError: If the file cannot be read
    """
    path = Path(path)
    try:
        with open(path, 'rb') as f:
            magic = f.read(4)
    except OSError as e:
        raise ImageIOError(f"Cannot open image: {e}", layer=str(path)) from e

    if image_format is None:
        image_format = 'qcow2' if magic == QCOW2_MAGIC else 'raw'

    if image_format == 'qcow2':
        if writable:
            raise UnsupportedFeatureError("Writing QCOW2 images is not supported; flatten to RAW first")
        image = Qcow2Image(path, depth=_depth, _seen=_seen)
        logger.info("Opened %s (qcow2 v%d, %d byte clusters, chain depth %d)",
                    path, image.version, image.cluster_size, len(image.chain()))
        return image
    if image_format == 'raw':
        return RawImage(path, writable=writable)
    raise UnsupportedFeatureError(f"Unknown image format {image_format!r}")


def _is_bare_filesystem(sector0: bytes) -> bool:
    return sector0[3:11] in BARE_FS_OEM_IDS


def _gpt_partitions(image: ImageHandle) -> List[Partition]:
    if image.virtual_size < 2 * SECTOR_SIZE:
        return []
    header = GPT_HEADER.unpack(image.read_guest(SECTOR_SIZE, GPT_HEADER.size))
    if header['signature'] != GPT_SIGNATURE:
        logger.warning("Protective MBR without a GPT header in %s", image.path)
        return []
    entry_size = header['entry_size']
    count = min(header['num_entries'], GPT_MAX_ENTRIES)
    if entry_size < GPT_ENTRY.size:
        raise ImageError(f"GPT entry size {entry_size} too small in {image.path}")
    table_offset = header['entries_lba'] * SECTOR_SIZE
    count = min(count, max(0, (image.virtual_size - table_offset) // entry_size))
    table = image.read_guest(table_offset, count * entry_size)

    partitions = []
    for i in range(count):
        entry = GPT_ENTRY.unpack(table, i * entry_size)
        if entry['type_guid'] == bytes(16):
            continue
        name = entry['name'].decode('utf-16-le', errors='replace').rstrip('\x00')
        partitions.append(Partition(
            index=i + 1,
            start_offset=entry['first_lba'] * SECTOR_SIZE,
            size=(entry['last_lba'] - entry['first_lba'] + 1) * SECTOR_SIZE,
            type_id=str(uuid.UUID(bytes_le=entry['type_guid'])),
            scheme='gpt',
            extra={'name': name, 'unique_guid': str(uuid.UUID(bytes_le=entry['unique_guid']))},
        ))
    return partitions


def list_partitions(image: ImageHandle) -> List[Partition]:
    """
    List primary MBR partitions, or GPT partitions behind a protective MBR.

    A sector 0 that is itself a filesystem boot sector (NTFS/FAT) means the
    image holds a bare filesystem and has no partitions.
    """
    if image.virtual_size < SECTOR_SIZE:
        return []
    sector0 = image.read_guest(0, SECTOR_SIZE)
    if sector0[510:512] != MBR_SIGNATURE or _is_bare_filesystem(sector0):
        return []

    entries = [MBR_ENTRY.unpack(sector0, MBR_TABLE_OFFSET + i * MBR_ENTRY.size) for i in range(4)]
    if any(e['type'] == MBR_GPT_PROTECTIVE for e in entries):
        return _gpt_partitions(image)

    partitions = []
    for i, entry in enumerate(entries):
        if entry['type'] == 0 or entry['type'] in MBR_EXTENDED_TYPES or entry['sectors'] == 0:
            continue
        partitions.append(Partition(
            index=i + 1,
            start_offset=entry['lba_start'] * SECTOR_SIZE,
            size=entry['sectors'] * SECTOR_SIZE,
            type_id=f"0x{entry['type']:02x}",
            scheme='mbr',
            extra={'bootable': entry['status'] == 0x80},
        ))
    return partitions


def locate_filesystem(image: ImageHandle) -> int:
    """
    Byte offset where the guest filesystem starts.

    Returns the first partition's start (MBR or GPT), or 0 for an image
    without a partition table or with a malformed one.
    """
    try:
        partitions = list_partitions(image)
    except ImageIOError:
        raise
    except ImageError as e:
        logger.warning("Ignoring malformed partition table in %s: %s", image.path, e)
        return 0
    if not partitions:
        return 0
    offset = partitions[0].start_offset
    logger.debug("Filesystem of %s starts at %d (%s partition %d)",
                 image.path, offset, partitions[0].scheme, partitions[0].index)
    return offset
