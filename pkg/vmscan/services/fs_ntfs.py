"""
Read-only NTFS reader for vmscan.

Parses the boot sector, MFT FILE records (with update-sequence fixups),
their attributes and data run lists, and maps a file to the image blocks
holding its content. Paths are resolved from the FILE_NAME parent
references collected in one linear pass over the MFT.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

from ..errors import (
    BadMagicError,
    CorruptFsError,
    FilesystemError,
    MalformedRunListError,
    PathNotFoundError,
    ScannerError,
    UnsupportedFeatureError,
)
from ..models import FileBlockMap, FileKind, ImageGeometry, InodeRef
from .filesystem import blocks_for_extents, fold_name, normalize_guest_path
from .image import LITTLE_ENDIAN, ImageHandle, Struct

logger = logging.getLogger(__name__)

NTFS_OEM = b'NTFS    '
BOOT_SIGNATURE = b'\x55\xaa'

BOOT_SECTOR = Struct([
    ('jump', '3s'),
    ('oem_id', '8s'),
    ('bytes_per_sector', 'H'),
    ('sectors_per_cluster', 'B'),
    ('reserved_sectors', 'H'),
    ('zero1', '3s'),
    ('unused1', 'H'),
    ('media', 'B'),
    ('zero2', 'H'),
    ('sectors_per_track', 'H'),
    ('heads', 'H'),
    ('hidden_sectors', 'I'),
    ('unused2', 'I'),
    ('unused3', 'I'),
    ('total_sectors', 'Q'),
    ('mft_lcn', 'Q'),
    ('mftmirr_lcn', 'Q'),
    ('clusters_per_mft_record', 'b'),
    ('pad1', '3s'),
    ('clusters_per_index_record', 'b'),
    ('pad2', '3s'),
    ('serial', 'Q'),
    ('checksum', 'I'),
], byte_order=LITTLE_ENDIAN)

FILE_RECORD = Struct([
    ('magic', '4s'),
    ('usa_offset', 'H'),
    ('usa_count', 'H'),
    ('lsn', 'Q'),
    ('sequence', 'H'),
    ('link_count', 'H'),
    ('attrs_offset', 'H'),
    ('flags', 'H'),
    ('bytes_in_use', 'I'),
    ('bytes_allocated', 'I'),
    ('base_record', 'Q'),
    ('next_attr_id', 'H'),
], byte_order=LITTLE_ENDIAN)
FILE_MAGIC = b'FILE'
FIXUP_STRIDE = 512
RECORD_IN_USE = 0x0001
RECORD_IS_DIRECTORY = 0x0002

ATTR_HEADER = Struct([
    ('type', 'I'),
    ('length', 'I'),
    ('non_resident', 'B'),
    ('name_length', 'B'),
    ('name_offset', 'H'),
    ('flags', 'H'),
    ('attr_id', 'H'),
], byte_order=LITTLE_ENDIAN)
RESIDENT_HEADER = Struct([
    ('value_length', 'I'),
    ('value_offset', 'H'),
    ('indexed', 'B'),
], byte_order=LITTLE_ENDIAN)
NONRESIDENT_HEADER = Struct([
    ('start_vcn', 'Q'),
    ('last_vcn', 'Q'),
    ('mapping_pairs_offset', 'H'),
    ('compression_unit', 'H'),
    ('pad', 'I'),
    ('allocated_size', 'Q'),
    ('data_size', 'Q'),
    ('initialized_size', 'Q'),
], byte_order=LITTLE_ENDIAN)
FILE_NAME = Struct([
    ('parent_ref', 'Q'),
    ('ctime', 'Q'),
    ('mtime', 'Q'),
    ('mft_mtime', 'Q'),
    ('atime', 'Q'),
    ('allocated_size', 'Q'),
    ('real_size', 'Q'),
    ('flags', 'I'),
    ('reparse', 'I'),
    ('name_length', 'B'),
    ('namespace', 'B'),
], byte_order=LITTLE_ENDIAN)

ATTR_STANDARD_INFORMATION = 0x10
ATTR_ATTRIBUTE_LIST = 0x20
ATTR_FILE_NAME = 0x30
ATTR_DATA = 0x80
ATTR_END = 0xFFFFFFFF

ATTR_FLAG_COMPRESSED = 0x0001
ATTR_FLAG_ENCRYPTED = 0x4000
ATTR_FLAG_SPARSE = 0x8000

NAMESPACE_POSIX = 0
NAMESPACE_WIN32 = 1
NAMESPACE_DOS = 2
NAMESPACE_WIN32_DOS = 3
NAMESPACE_RANK = {NAMESPACE_WIN32: 0, NAMESPACE_WIN32_DOS: 0, NAMESPACE_POSIX: 1, NAMESPACE_DOS: 2}

MFT_RECORD = 0
ROOT_RECORD = 5
FIRST_USER_RECORD = 24
MFT_REF_MASK = (1 << 48) - 1


class Run(NamedTuple):
    """One data run: cluster count and start LCN (None when sparse)."""
    count: int
    lcn: Optional[int]

    @property
    def sparse(self) -> bool:
        return self.lcn is None


@dataclass
class RunList:
    """Decoded mapping pairs of a non-resident attribute."""
    runs: List[Run] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.runs)

    def __iter__(self):
        return iter(self.runs)

    @property
    def total_clusters(self) -> int:
        return sum(run.count for run in self.runs)


def decode_run_list(raw: bytes) -> RunList:
    """
    Decode an NTFS mapping-pairs array.

    Each pair starts with a header byte: low nibble = size of the cluster
    count field, high nibble = size of the signed LCN delta field. A zero
    delta size marks a sparse run. A 0x00 header terminates the list.

    Raises:
        MalformedRunListError: If a pair is truncated or describes an empty
                               or negative run
    """
    runs: List[Run] = []
    lcn = 0
    position = 0
    while position < len(raw):
        header = raw[position]
        if header == 0:
            break
        length_size = header & 0x0F
        offset_size = header >> 4
        if length_size == 0 or length_size > 8 or offset_size > 8:
            raise MalformedRunListError(f"Invalid run header 0x{header:02x} at byte {position}")
        end = position + 1 + length_size + offset_size
        if end > len(raw):
            raise MalformedRunListError(f"Run at byte {position} is truncated")
        count = int.from_bytes(raw[position + 1:position + 1 + length_size], 'little')
        if count == 0:
            raise MalformedRunListError(f"Run at byte {position} has zero clusters")
        if offset_size == 0:
            runs.append(Run(count, None))
        else:
            delta = int.from_bytes(raw[position + 1 + length_size:end], 'little', signed=True)
            lcn += delta
            if lcn < 0:
                raise MalformedRunListError(f"Run at byte {position} starts at negative LCN {lcn}")
            runs.append(Run(count, lcn))
        position = end
    return RunList(runs)


@dataclass
class NtfsAttribute:
    """
    One attribute of an MFT record.

    Attributes:
        type_code: Attribute type (0x30 FILE_NAME, 0x80 DATA ...)
        name: Attribute name ('' for the unnamed stream)
        resident: True when the value is stored inside the record
        flags: Compressed / encrypted / sparse flags
        value: Resident value bytes
        value_offset: Offset of the resident value inside the record
        runs: Decoded run list (non-resident)
        data_size: Logical size of the value
        initialized_size: Bytes actually written (non-resident)
        start_vcn: First VCN described by this attribute (non-resident)
    """
    type_code: int
    name: str
    resident: bool
    flags: int
    value: bytes = b''
    value_offset: int = 0
    runs: Optional[RunList] = None
    data_size: int = 0
    initialized_size: int = 0
    start_vcn: int = 0


@dataclass
class MftRecord:
    """A fixed-up MFT FILE record and its attributes."""
    record_no: int
    flags: int
    base_record: int
    sequence: int
    attributes: List[NtfsAttribute]

    @property
    def in_use(self) -> bool:
        return bool(self.flags & RECORD_IN_USE)

    @property
    def is_dir(self) -> bool:
        return bool(self.flags & RECORD_IS_DIRECTORY)

    def find(self, type_code: int) -> List[NtfsAttribute]:
        return [a for a in self.attributes if a.type_code == type_code]

    def data_attribute(self) -> Optional[NtfsAttribute]:
        for attribute in self.find(ATTR_DATA):
            if not attribute.name:
                return attribute
        return None

    def named_streams(self) -> List[str]:
        return [a.name for a in self.find(ATTR_DATA) if a.name]

    def best_file_name(self) -> Optional[Tuple[int, str]]:
        """(parent record, name) from the preferred FILE_NAME namespace."""
        best = None
        best_rank = None
        for attribute in self.find(ATTR_FILE_NAME):
            if not attribute.resident or len(attribute.value) < FILE_NAME.size:
                continue
            info = FILE_NAME.unpack(attribute.value)
            rank = NAMESPACE_RANK.get(info['namespace'], 3)
            raw_name = attribute.value[FILE_NAME.size:FILE_NAME.size + info['name_length'] * 2]
            name = raw_name.decode('utf-16-le', errors='replace')
            if best_rank is None or rank < best_rank:
                best = (info['parent_ref'] & MFT_REF_MASK, name)
                best_rank = rank
        return best

    def mtime(self) -> int:
        for attribute in self.find(ATTR_STANDARD_INFORMATION):
            if attribute.resident and len(attribute.value) >= 16:
                return int.from_bytes(attribute.value[8:16], 'little')
        return 0


def apply_fixups(raw: bytes, record_no: Optional[int] = None) -> bytes:
    """
    Verify and undo the update-sequence fixups of a FILE record.

    Raises:
        CorruptFsError: If the header is not FILE or any sector's check value mismatches
    """
    header = FILE_RECORD.unpack(raw)
    if header['magic'] != FILE_MAGIC:
        raise CorruptFsError(f"MFT record magic is {header['magic']!r}", inode=record_no)
    usa_offset = header['usa_offset']
    usa_count = header['usa_count']
    sectors = len(raw) // FIXUP_STRIDE
    if usa_count != sectors + 1 or usa_offset + 2 * usa_count > len(raw):
        raise CorruptFsError(f"Update sequence array of {usa_count} entries does not fit the record",
                             inode=record_no)
    fixed = bytearray(raw)
    check = raw[usa_offset:usa_offset + 2]
    for i in range(sectors):
        end = (i + 1) * FIXUP_STRIDE
        if raw[end - 2:end] != check:
            raise CorruptFsError(f"Fixup mismatch in sector {i}", inode=record_no)
        entry = usa_offset + 2 + 2 * i
        fixed[end - 2:end] = raw[entry:entry + 2]
    return bytes(fixed)


def parse_record(raw: bytes, record_no: int) -> MftRecord:
    """
    Fix up and parse one FILE record.

    Raises:
        CorruptFsError: If fixups fail or an attribute overruns the record
        MalformedRunListError: If a run list cannot be decoded
    """
    data = apply_fixups(raw, record_no)
    header = FILE_RECORD.unpack(data)
    limit = min(header['bytes_in_use'], len(data))
    position = header['attrs_offset']
    attributes: List[NtfsAttribute] = []
    while position + 4 <= limit:
        type_code = int.from_bytes(data[position:position + 4], 'little')
        if type_code == ATTR_END:
            break
        if position + ATTR_HEADER.size > limit:
            raise CorruptFsError("Attribute header overruns the record", inode=record_no)
        attr = ATTR_HEADER.unpack(data, position)
        length = attr['length']
        if length < ATTR_HEADER.size or position + length > limit:
            raise CorruptFsError(f"Attribute 0x{type_code:x} has bad length {length}", inode=record_no)
        body = data[position:position + length]
        name = ''
        if attr['name_length']:
            name_start = attr['name_offset']
            name = body[name_start:name_start + attr['name_length'] * 2].decode('utf-16-le', errors='replace')

        if attr['non_resident']:
            nr = NONRESIDENT_HEADER.unpack(body, ATTR_HEADER.size)
            runs = decode_run_list(body[nr['mapping_pairs_offset']:])
            attributes.append(NtfsAttribute(
                type_code=type_code, name=name, resident=False, flags=attr['flags'],
                runs=runs, data_size=nr['data_size'], initialized_size=nr['initialized_size'],
                start_vcn=nr['start_vcn'],
            ))
        else:
            res = RESIDENT_HEADER.unpack(body, ATTR_HEADER.size)
            start = res['value_offset']
            if start + res['value_length'] > length:
                raise CorruptFsError(f"Resident value of attribute 0x{type_code:x} overruns it",
                                     inode=record_no)
            attributes.append(NtfsAttribute(
                type_code=type_code, name=name, resident=True, flags=attr['flags'],
                value=body[start:start + res['value_length']], value_offset=position + start,
                data_size=res['value_length'], initialized_size=res['value_length'],
            ))
        position += length

    return MftRecord(
        record_no=record_no,
        flags=header['flags'],
        base_record=header['base_record'] & MFT_REF_MASK,
        sequence=header['sequence'],
        attributes=attributes,
    )


class NtfsFs:
    """
    Mounted (read-only) NTFS volume.

    Attributes:
        image: Image holding the volume
        partition_offset: Byte offset of the volume in the image
        geometry: Dirty-map geometry block addresses are converted to
        bytes_per_sector, sectors_per_cluster, cluster_size: Volume geometry
        mft_record_size: Bytes per FILE record
        alternate_streams: Named DATA streams skipped while mapping files
    """

    fs_type = 'ntfs'
    case_insensitive = True

    def __init__(self, image: ImageHandle, partition_offset: int, geometry: ImageGeometry):
        self.image = image
        self.partition_offset = partition_offset
        self.geometry = geometry
        self.alternate_streams = 0
        self._tables_built = False
        self._names: Dict[int, Tuple[int, str, bool]] = {}
        self._children: Dict[int, Dict[str, int]] = {}
        self._record_cache: Dict[int, MftRecord] = {}
        self._read_boot_sector()
        self._read_mft()

    def __repr__(self) -> str:
        return (f"NtfsFs(offset={self.partition_offset}, cluster_size={self.cluster_size}, "
                f"records={self.record_count})")

    def _read_boot_sector(self) -> None:
        if self.partition_offset + 512 > self.image.virtual_size:
            raise BadMagicError(f"Image too small for an NTFS boot sector at {self.partition_offset}")
        raw = self.image.read_guest(self.partition_offset, 512)
        boot = BOOT_SECTOR.unpack(raw)
        if boot['oem_id'] != NTFS_OEM or raw[510:512] != BOOT_SIGNATURE:
            raise BadMagicError(f"No NTFS boot sector at offset {self.partition_offset}")

        bps = boot['bytes_per_sector']
        if bps < 256 or bps > 4096 or bps & (bps - 1):
            raise CorruptFsError(f"Invalid bytes per sector {bps}")
        spc = boot['sectors_per_cluster']
        if spc == 0:
            raise CorruptFsError("Sectors per cluster is zero")
        if spc > 0x80:
            spc = 1 << (256 - spc)

        self.boot = boot
        self.bytes_per_sector = bps
        self.sectors_per_cluster = spc
        self.cluster_size = bps * spc
        cpr = boot['clusters_per_mft_record']
        self.mft_record_size = cpr * self.cluster_size if cpr > 0 else 1 << -cpr
        if self.mft_record_size < FIXUP_STRIDE or self.mft_record_size % FIXUP_STRIDE:
            raise CorruptFsError(f"Invalid MFT record size {self.mft_record_size}")
        self.total_clusters = boot['total_sectors'] // spc

    def _cluster_extents(self, runs: RunList, limit_clusters: Optional[int] = None) -> List[Tuple[Optional[int], int]]:
        """(image offset or None, length) for each run, clipped to limit_clusters."""
        extents: List[Tuple[Optional[int], int]] = []
        remaining = runs.total_clusters if limit_clusters is None else limit_clusters
        for run in runs:
            if remaining <= 0:
                break
            count = min(run.count, remaining)
            remaining -= count
            if run.sparse:
                extents.append((None, count * self.cluster_size))
            else:
                if run.lcn + count > self.total_clusters + 1:
                    raise CorruptFsError(f"Run at LCN {run.lcn} extends past the volume")
                extents.append((self.partition_offset + run.lcn * self.cluster_size, count * self.cluster_size))
        return extents

    def _read_mft(self) -> None:
        location = self.partition_offset + self.boot['mft_lcn'] * self.cluster_size
        try:
            raw = self.image.read_guest(location, self.mft_record_size)
            record = parse_record(raw, MFT_RECORD)
        except ScannerError as e:
            raise CorruptFsError(f"Unreadable $MFT record: {e}", inode=MFT_RECORD) from e
        if record.find(ATTR_ATTRIBUTE_LIST):
            raise UnsupportedFeatureError("$MFT uses an attribute list")
        data = record.data_attribute()
        if data is None or data.resident:
            raise CorruptFsError("$MFT has no non-resident DATA attribute", inode=MFT_RECORD)
        self._mft_extents: List[Tuple[int, Optional[int], int]] = []
        stream_offset = 0
        for offset, length in self._cluster_extents(data.runs):
            self._mft_extents.append((stream_offset, offset, length))
            stream_offset += length
        self.record_count = data.data_size // self.mft_record_size
        self._record_cache[MFT_RECORD] = record

    def record_pieces(self, record_no: int) -> List[Tuple[int, int]]:
        """Image byte ranges holding one FILE record (one piece unless clusters are tiny)."""
        if not 0 <= record_no < self.record_count:
            raise CorruptFsError(f"MFT record number out of range (0..{self.record_count - 1})",
                                 inode=record_no)
        start = record_no * self.mft_record_size
        end = start + self.mft_record_size
        pieces = []
        for stream_offset, image_offset, length in self._mft_extents:
            lo = max(start, stream_offset)
            hi = min(end, stream_offset + length)
            if lo >= hi:
                continue
            if image_offset is None:
                raise CorruptFsError("MFT record lies in a sparse run", inode=record_no)
            pieces.append((image_offset + lo - stream_offset, hi - lo))
        return pieces

    def record_location(self, record_no: int) -> int:
        return self.record_pieces(record_no)[0][0]

    def read_record_raw(self, record_no: int) -> bytes:
        return b''.join(self.image.read_guest(offset, length) for offset, length in self.record_pieces(record_no))

    def read_record(self, record_no: int) -> MftRecord:
        record = self._record_cache.get(record_no)
        if record is None:
            record = parse_record(self.read_record_raw(record_no), record_no)
            self._record_cache[record_no] = record
        return record

    def _build_tables(self) -> None:
        if self._tables_built:
            return
        for record_no in range(self.record_count):
            try:
                raw = self.read_record_raw(record_no)
                if raw[:4] != FILE_MAGIC:
                    continue
                record = parse_record(raw, record_no)
            except (CorruptFsError, MalformedRunListError) as e:
                logger.warning("Skipping MFT record %d: %s", record_no, e)
                continue
            if not record.in_use or record.base_record:
                continue
            name = record.best_file_name()
            if name is None:
                continue
            parent, file_name = name
            self._names[record_no] = (parent, file_name, record.is_dir)
            if record_no != ROOT_RECORD:
                self._children.setdefault(parent, {})[fold_name(file_name)] = record_no
        self._tables_built = True
        logger.debug("Indexed %d named MFT records", len(self._names))

    def normalize_path(self, path: str) -> str:
        return normalize_guest_path(self.fs_type, path)

    def resolve_record(self, path: str) -> int:
        """
        Record number for a path, matching components case-insensitively.

        Raises:
            PathNotFoundError: If a component is missing
        """
        self._build_tables()
        record_no = ROOT_RECORD
        for component in self.normalize_path(path).split('\\'):
            if not component:
                continue
            child = self._children.get(record_no, {}).get(fold_name(component))
            if child is None:
                raise PathNotFoundError(path)
            record_no = child
        return record_no

    def inode_ref(self, record_no: int) -> InodeRef:
        record = self.read_record(record_no)
        if not record.in_use:
            raise CorruptFsError("MFT record is not in use", inode=record_no)
        data = record.data_attribute()
        size = data.data_size if data is not None else 0
        return InodeRef(
            inode_no=record_no,
            location=self.record_location(record_no),
            length=self.mft_record_size,
            kind=FileKind.DIRECTORY if record.is_dir else FileKind.REGULAR,
            size=size,
            mtime=record.mtime(),
            mode=record.flags,
        )

    def resolve(self, path: str) -> InodeRef:
        return self.inode_ref(self.resolve_record(path))

    def data_attribute(self, record_no: int) -> NtfsAttribute:
        """
        The unnamed DATA attribute of a record.

        Raises:
            UnsupportedFeatureError: For attribute-list, compressed or encrypted data
            CorruptFsError: If the record has no unnamed DATA attribute
        """
        record = self.read_record(record_no)
        if record.find(ATTR_ATTRIBUTE_LIST):
            raise UnsupportedFeatureError(f"MFT record {record_no} spreads its attributes over an attribute list")
        named = record.named_streams()
        if named:
            self.alternate_streams += len(named)
            logger.info("Ignoring alternate data streams %s of MFT record %d", named, record_no)
        data = record.data_attribute()
        if data is None:
            raise CorruptFsError("No unnamed DATA attribute", inode=record_no)
        if data.flags & ATTR_FLAG_COMPRESSED:
            raise UnsupportedFeatureError(f"MFT record {record_no} has compressed data")
        if data.flags & ATTR_FLAG_ENCRYPTED:
            raise UnsupportedFeatureError(f"MFT record {record_no} has encrypted data")
        return data

    def _data_extents(self, data: NtfsAttribute) -> List[Tuple[Optional[int], int]]:
        clusters = -(-data.data_size // self.cluster_size)
        return self._cluster_extents(data.runs, clusters)

    def content_extents(self, ref: InodeRef) -> List[Tuple[int, int]]:
        """Image byte ranges of the file's allocated clusters (empty for resident data)."""
        data = self.data_attribute(ref.inode_no)
        if data.resident:
            return []
        return [(offset, length) for offset, length in self._data_extents(data) if offset is not None]

    def logical_extents(self, ref: InodeRef) -> List[Tuple[int, Optional[int], int]]:
        """
        (file offset, image offset or None when sparse, length) runs in file order.

        Raises:
            UnsupportedFeatureError: For resident data, which sits under the record's fixups
        """
        data = self.data_attribute(ref.inode_no)
        if data.resident:
            raise UnsupportedFeatureError(f"MFT record {ref.inode_no} data is resident")
        extents = []
        position = 0
        for offset, length in self._data_extents(data):
            extents.append((position, offset, length))
            position += length
        return extents

    def file_block_map(self, path: str, ref: Optional[InodeRef] = None) -> FileBlockMap:
        """
        Map a file to dirty-map block addresses.

        Resident data maps to the block(s) holding the MFT record; non-resident
        data maps cluster runs, with sparse runs as holes.
        """
        if ref is None:
            ref = self.resolve(path)
        if not ref.is_regular:
            raise FilesystemError(f"{path} is not a regular file")
        data = self.data_attribute(ref.inode_no)
        if data.resident:
            blocks = blocks_for_extents(self.geometry, self.record_pieces(ref.inode_no))
        else:
            blocks = blocks_for_extents(self.geometry, self._data_extents(data))
        return FileBlockMap(
            path=path,
            inode_no=ref.inode_no,
            blocks=blocks,
            resident=data.resident,
            size=data.data_size,
            metadata_offset=ref.location,
            metadata_length=self.mft_record_size,
            geometry=self.geometry,
        )

    def read_file(self, ref: InodeRef) -> bytes:
        """File content; bytes past initialized_size and sparse runs read as zeros."""
        data = self.data_attribute(ref.inode_no)
        if data.resident:
            return data.value
        content = bytearray(data.data_size)
        initialized = min(data.initialized_size, data.data_size)
        position = 0
        for offset, length in self._data_extents(data):
            wanted = min(length, initialized - position)
            if wanted > 0 and offset is not None:
                content[position:position + wanted] = self.image.read_guest(offset, wanted)
            position += length
        return bytes(content)

    def resident_wipe(self, ref: InodeRef) -> List[Tuple[int, bytes]]:
        """
        On-disk bytes that zero a resident DATA value while keeping fixups valid.

        Value bytes sitting at a sector's check position live in the update
        sequence array, so those array entries are zeroed instead.

        Returns:
            (image offset, bytes) pieces to write back
        """
        data = self.data_attribute(ref.inode_no)
        if not data.resident:
            raise FilesystemError(f"MFT record {ref.inode_no} data is not resident")
        raw = bytearray(self.read_record_raw(ref.inode_no))
        header = FILE_RECORD.unpack(raw)
        usa_offset = header['usa_offset']
        start = data.value_offset
        end = start + data.data_size
        for position in range(start, end):
            sector, within = divmod(position, FIXUP_STRIDE)
            if within >= FIXUP_STRIDE - 2:
                entry = usa_offset + 2 + 2 * sector + (within - (FIXUP_STRIDE - 2))
                raw[entry] = 0
            else:
                raw[position] = 0
        pieces = []
        cursor = 0
        for offset, length in self.record_pieces(ref.inode_no):
            pieces.append((offset, bytes(raw[cursor:cursor + length])))
            cursor += length
        self._record_cache.pop(ref.inode_no, None)
        return pieces

    def list_all_files(self) -> List[Tuple[str, InodeRef]]:
        """
        Every file reachable from the root, as backslash-separated paths.

        Metafiles (records below 24 and $-names in the root) are skipped.

        Raises:
            CorruptFsError: If a directory is reachable twice
        """
        self._build_tables()
        results: List[Tuple[str, InodeRef]] = []
        visited = {ROOT_RECORD}
        stack = [('', ROOT_RECORD)]
        while stack:
            dir_path, dir_record = stack.pop()
            for _folded, child in self._children.get(dir_record, {}).items():
                if child < FIRST_USER_RECORD:
                    continue
                _parent, name, is_dir = self._names[child]
                if dir_record == ROOT_RECORD and name.startswith('$'):
                    continue
                child_path = f'{dir_path}\\{name}'
                if is_dir:
                    if child in visited:
                        raise CorruptFsError(f"Directory loop at {child_path}", inode=child)
                    visited.add(child)
                    stack.append((child_path, child))
                else:
                    results.append((child_path, self.inode_ref(child)))
        results.sort(key=lambda item: fold_name(item[0]))
        return results


def mount_ntfs(image: ImageHandle, partition_offset: int, geometry: Optional[ImageGeometry] = None) -> NtfsFs:
    """
    Mount an NTFS volume read-only.

    Raises:
        BadMagicError: If the boot sector is not NTFS
        CorruptFsError: If the geometry is invalid or $MFT cannot be read
    """
    if geometry is None:
        geometry = ImageGeometry.for_image(image.virtual_size, partition_offset)
    fs = NtfsFs(image, partition_offset, geometry)
    logger.debug("Mounted %r", fs)
    return fs


def resolve_path_mft(fs: NtfsFs, path: str) -> int:
    return fs.resolve_record(path)


def file_cluster_addresses(fs: NtfsFs, record_no: int, path: str = '') -> FileBlockMap:
    return fs.file_block_map(path, fs.inode_ref(record_no))
