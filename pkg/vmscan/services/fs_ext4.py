"""
Read-only EXT2/3/4 reader for vmscan.

Reconstructs the guest filesystem from the image: superblock, group
descriptors, inodes, directory entries, and the mapping of a file to the
image blocks holding its content (extent trees or the classic 12 direct +
single/double/triple indirect pointers).
"""

import logging
import posixpath
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from ..errors import (
    BadMagicError,
    CorruptFsError,
    FilesystemError,
    PathNotFoundError,
    UnsupportedFeatureError,
)
from ..models import FileBlockMap, FileKind, ImageGeometry, InodeRef
from .filesystem import blocks_for_extents, normalize_guest_path
from .image import LITTLE_ENDIAN, ImageHandle, Struct

logger = logging.getLogger(__name__)

SUPERBLOCK_OFFSET = 1024
EXT_SUPER_MAGIC = 0xEF53
ROOT_INO = 2

SUPERBLOCK = Struct([
    ('inodes_count', 'I'),
    ('blocks_count_lo', 'I'),
    ('r_blocks_count_lo', 'I'),
    ('free_blocks_count_lo', 'I'),
    ('free_inodes_count', 'I'),
    ('first_data_block', 'I'),
    ('log_block_size', 'I'),
    ('log_cluster_size', 'I'),
    ('blocks_per_group', 'I'),
    ('clusters_per_group', 'I'),
    ('inodes_per_group', 'I'),
    ('mtime', 'I'),
    ('wtime', 'I'),
    ('mnt_count', 'H'),
    ('max_mnt_count', 'H'),
    ('magic', 'H'),
    ('state', 'H'),
    ('errors', 'H'),
    ('minor_rev_level', 'H'),
    ('lastcheck', 'I'),
    ('checkinterval', 'I'),
    ('creator_os', 'I'),
    ('rev_level', 'I'),
    ('def_resuid', 'H'),
    ('def_resgid', 'H'),
    ('first_ino', 'I'),
    ('inode_size', 'H'),
    ('block_group_nr', 'H'),
    ('feature_compat', 'I'),
    ('feature_incompat', 'I'),
    ('feature_ro_compat', 'I'),
    ('uuid', '16s'),
    ('volume_name', '16s'),
    ('last_mounted', '64s'),
    ('algorithm_usage_bitmap', 'I'),
    ('prealloc_blocks', 'B'),
    ('prealloc_dir_blocks', 'B'),
    ('reserved_gdt_blocks', 'H'),
    ('journal_uuid', '16s'),
    ('journal_inum', 'I'),
    ('journal_dev', 'I'),
    ('last_orphan', 'I'),
    ('hash_seed', '16s'),
    ('def_hash_version', 'B'),
    ('jnl_backup_type', 'B'),
    ('desc_size', 'H'),
], byte_order=LITTLE_ENDIAN)
SB_BLOCKS_COUNT_HI_OFFSET = 0x150

INODE = Struct([
    ('mode', 'H'),
    ('uid', 'H'),
    ('size_lo', 'I'),
    ('atime', 'I'),
    ('ctime', 'I'),
    ('mtime', 'I'),
    ('dtime', 'I'),
    ('gid', 'H'),
    ('links_count', 'H'),
    ('blocks_lo', 'I'),
    ('flags', 'I'),
    ('osd1', 'I'),
    ('block', '60s'),
    ('generation', 'I'),
    ('file_acl_lo', 'I'),
    ('size_high', 'I'),
], byte_order=LITTLE_ENDIAN)
INODE_BLOCK_OFFSET = 40
INODE_BLOCK_SIZE = 60
INODE_EXTRA_ISIZE_OFFSET = 128
GOOD_OLD_INODE_SIZE = 128
GOOD_OLD_FIRST_INO = 11

EXTENT_HEADER = Struct([
    ('magic', 'H'),
    ('entries', 'H'),
    ('max', 'H'),
    ('depth', 'H'),
    ('generation', 'I'),
], byte_order=LITTLE_ENDIAN)
EXTENT = Struct([
    ('block', 'I'),
    ('len', 'H'),
    ('start_hi', 'H'),
    ('start_lo', 'I'),
], byte_order=LITTLE_ENDIAN)
EXTENT_INDEX = Struct([
    ('block', 'I'),
    ('leaf_lo', 'I'),
    ('leaf_hi', 'H'),
    ('unused', 'H'),
], byte_order=LITTLE_ENDIAN)
EXTENT_MAGIC = 0xF30A
EXT_INIT_MAX_LEN = 32768
MAX_EXTENT_DEPTH = 5

DIR_ENTRY = Struct([
    ('inode', 'I'),
    ('rec_len', 'H'),
    ('name_len', 'B'),
    ('file_type', 'B'),
], byte_order=LITTLE_ENDIAN)

XATTR_IBODY_MAGIC = 0xEA020000
XATTR_ENTRY = Struct([
    ('name_len', 'B'),
    ('name_index', 'B'),
    ('value_offs', 'H'),
    ('value_inum', 'I'),
    ('value_size', 'I'),
    ('hash', 'I'),
], byte_order=LITTLE_ENDIAN)
XATTR_INDEX_SYSTEM = 7

# Inode flags
EXT4_INDEX_FL = 0x1000
EXT4_EXTENTS_FL = 0x80000
EXT4_INLINE_DATA_FL = 0x10000000

# Mode bits
S_IFMT = 0xF000
S_IFREG = 0x8000
S_IFDIR = 0x4000
S_IFLNK = 0xA000

# Incompatible features
INCOMPAT_COMPRESSION = 0x0001
INCOMPAT_FILETYPE = 0x0002
INCOMPAT_RECOVER = 0x0004
INCOMPAT_JOURNAL_DEV = 0x0008
INCOMPAT_META_BG = 0x0010
INCOMPAT_EXTENTS = 0x0040
INCOMPAT_64BIT = 0x0080
INCOMPAT_MMP = 0x0100
INCOMPAT_FLEX_BG = 0x0200
INCOMPAT_EA_INODE = 0x0400
INCOMPAT_DIRDATA = 0x1000
INCOMPAT_CSUM_SEED = 0x2000
INCOMPAT_LARGEDIR = 0x4000
INCOMPAT_INLINE_DATA = 0x8000
INCOMPAT_ENCRYPT = 0x10000
INCOMPAT_CASEFOLD = 0x20000

SUPPORTED_INCOMPAT = (INCOMPAT_FILETYPE | INCOMPAT_RECOVER | INCOMPAT_EXTENTS | INCOMPAT_64BIT
                      | INCOMPAT_MMP | INCOMPAT_FLEX_BG | INCOMPAT_CSUM_SEED | INCOMPAT_LARGEDIR
                      | INCOMPAT_INLINE_DATA)
INCOMPAT_NAMES = {
    INCOMPAT_COMPRESSION: 'compression',
    INCOMPAT_JOURNAL_DEV: 'journal_dev',
    INCOMPAT_META_BG: 'meta_bg',
    INCOMPAT_EA_INODE: 'ea_inode',
    INCOMPAT_DIRDATA: 'dirdata',
    INCOMPAT_ENCRYPT: 'encrypt',
    INCOMPAT_CASEFOLD: 'casefold',
}

DIRECT_BLOCKS = 12


class BlockRun(NamedTuple):
    """Run of logical file blocks; physical is None for a hole."""
    logical: int
    physical: Optional[int]
    count: int
    uninit: bool = False


@dataclass
class Ext4Inode:
    """Decoded on-disk inode plus its location."""
    ino: int
    location: int
    fields: dict
    raw: bytes

    @property
    def mode(self) -> int:
        return self.fields['mode']

    @property
    def flags(self) -> int:
        return self.fields['flags']

    @property
    def kind(self) -> FileKind:
        fmt = self.mode & S_IFMT
        if fmt == S_IFREG:
            return FileKind.REGULAR
        if fmt == S_IFDIR:
            return FileKind.DIRECTORY
        if fmt == S_IFLNK:
            return FileKind.SYMLINK
        return FileKind.OTHER

    @property
    def size(self) -> int:
        size = self.fields['size_lo']
        if self.kind is FileKind.REGULAR:
            size |= self.fields['size_high'] << 32
        return size


class Ext4Fs:
    """
    Mounted (read-only) EXT filesystem.

    Attributes:
        image: Image holding the filesystem
        partition_offset: Byte offset of the filesystem in the image
        geometry: Dirty-map geometry block addresses are converted to
        superblock: Parsed superblock fields
        block_size: Filesystem block size in bytes
        blocks_count: Blocks in the volume
        inode_tables: Inode table start block per group
    """

    fs_type = 'ext4'
    case_insensitive = False

    def __init__(self, image: ImageHandle, partition_offset: int, geometry: ImageGeometry):
        self.image = image
        self.partition_offset = partition_offset
        self.geometry = geometry
        self._inode_cache: Dict[int, Ext4Inode] = {}
        self._dir_cache: Dict[int, List[Tuple[str, int, int]]] = {}
        self._read_superblock()
        self._read_group_descriptors()

    def __repr__(self) -> str:
        return (f"Ext4Fs(offset={self.partition_offset}, block_size={self.block_size}, "
                f"blocks={self.blocks_count}, groups={len(self.inode_tables)})")

    def _read(self, offset: int, length: int) -> bytes:
        return self.image.read_guest(self.partition_offset + offset, length)

    def _read_block(self, block: int, count: int = 1) -> bytes:
        return self._read(block * self.block_size, count * self.block_size)

    def _read_superblock(self) -> None:
        if self.partition_offset + SUPERBLOCK_OFFSET + 1024 > self.image.virtual_size:
            raise BadMagicError(f"Image too small for an EXT superblock at offset {self.partition_offset}")
        raw = self._read(SUPERBLOCK_OFFSET, 1024)
        sb = SUPERBLOCK.unpack(raw)
        if sb['magic'] != EXT_SUPER_MAGIC:
            raise BadMagicError(f"No EXT superblock at offset {self.partition_offset} (magic 0x{sb['magic']:04x})")
        if sb['log_block_size'] > 2:
            raise UnsupportedFeatureError(f"EXT block size {1024 << sb['log_block_size']} is not supported")

        incompat = sb['feature_incompat']
        unsupported = incompat & ~SUPPORTED_INCOMPAT
        if unsupported:
            names = [name for bit, name in INCOMPAT_NAMES.items() if unsupported & bit]
            raise UnsupportedFeatureError(
                f"EXT filesystem uses unsupported features: {', '.join(names) or hex(unsupported)}"
            )
        if incompat & INCOMPAT_RECOVER:
            logger.warning("EXT journal needs recovery; scanning the image as-is without replay")

        self.superblock = sb
        self.block_size = 1024 << sb['log_block_size']
        self.is_64bit = bool(incompat & INCOMPAT_64BIT)
        blocks_count = sb['blocks_count_lo']
        if self.is_64bit:
            blocks_count |= int.from_bytes(raw[SB_BLOCKS_COUNT_HI_OFFSET:SB_BLOCKS_COUNT_HI_OFFSET + 4],
                                           'little') << 32
        self.blocks_count = blocks_count
        if sb['rev_level'] == 0:
            self.inode_size = GOOD_OLD_INODE_SIZE
            self.first_ino = GOOD_OLD_FIRST_INO
        else:
            self.inode_size = sb['inode_size']
            self.first_ino = sb['first_ino']
        self.has_filetype = bool(incompat & INCOMPAT_FILETYPE)
        if sb['blocks_per_group'] == 0 or sb['inodes_per_group'] == 0 or self.inode_size < GOOD_OLD_INODE_SIZE:
            raise CorruptFsError("EXT superblock has zero-sized groups or inodes")

    def _read_group_descriptors(self) -> None:
        sb = self.superblock
        groups = -(-(self.blocks_count - sb['first_data_block']) // sb['blocks_per_group'])
        desc_size = sb['desc_size'] if self.is_64bit and sb['desc_size'] >= 64 else 32
        table_block = sb['first_data_block'] + 1
        raw = self._read(table_block * self.block_size, groups * desc_size)
        descriptors = np.frombuffer(raw, dtype=np.uint8).reshape(groups, desc_size)
        lo = descriptors[:, 8:12].copy().view('<u4').ravel().astype(np.uint64)
        if desc_size >= 64:
            hi = descriptors[:, 40:44].copy().view('<u4').ravel().astype(np.uint64)
            lo |= hi << np.uint64(32)
        self.inode_tables: List[int] = [int(block) for block in lo]
        self.desc_size = desc_size

    @property
    def inodes_count(self) -> int:
        return self.superblock['inodes_count']

    def inode_location(self, ino: int) -> int:
        """Image byte offset of an inode's on-disk entry."""
        if not 1 <= ino <= self.inodes_count:
            raise CorruptFsError(f"Inode number out of range (1..{self.inodes_count})", inode=ino)
        group, index = divmod(ino - 1, self.superblock['inodes_per_group'])
        if group >= len(self.inode_tables):
            raise CorruptFsError("Inode group beyond the group descriptor table", inode=ino)
        table = self.inode_tables[group]
        return self.partition_offset + table * self.block_size + index * self.inode_size

    def read_inode(self, ino: int) -> Ext4Inode:
        inode = self._inode_cache.get(ino)
        if inode is None:
            location = self.inode_location(ino)
            raw = self.image.read_guest(location, self.inode_size)
            inode = Ext4Inode(ino=ino, location=location, fields=INODE.unpack(raw), raw=raw)
            self._inode_cache[ino] = inode
        return inode

    def inode_ref(self, ino: int) -> InodeRef:
        inode = self.read_inode(ino)
        return InodeRef(
            inode_no=ino,
            location=inode.location,
            length=self.inode_size,
            kind=inode.kind,
            size=inode.size,
            mtime=inode.fields['mtime'],
            mode=inode.mode,
        )

    # Block mapping

    def _check_physical(self, inode: Ext4Inode, start: int, count: int) -> None:
        if start == 0 or start + count > self.blocks_count:
            raise CorruptFsError(
                f"Block pointer {start}+{count} outside the volume of {self.blocks_count} blocks",
                inode=inode.ino,
            )

    def _extent_runs(self, inode: Ext4Inode, node: bytes, depth_left: int, runs: List[BlockRun]) -> None:
        header = EXTENT_HEADER.unpack(node)
        if header['magic'] != EXTENT_MAGIC:
            raise CorruptFsError(f"Bad extent header magic 0x{header['magic']:04x}", inode=inode.ino)
        capacity = (len(node) - EXTENT_HEADER.size) // EXTENT.size
        if header['entries'] > header['max'] or header['entries'] > capacity:
            raise CorruptFsError("Extent node claims more entries than it holds", inode=inode.ino)
        if header['depth'] > depth_left:
            raise CorruptFsError(f"Extent tree deeper than {MAX_EXTENT_DEPTH}", inode=inode.ino)

        for i in range(header['entries']):
            position = EXTENT_HEADER.size + i * EXTENT.size
            if header['depth'] == 0:
                extent = EXTENT.unpack(node, position)
                length = extent['len']
                uninit = length > EXT_INIT_MAX_LEN
                if uninit:
                    length -= EXT_INIT_MAX_LEN
                start = (extent['start_hi'] << 32) | extent['start_lo']
                if length == 0:
                    continue
                self._check_physical(inode, start, length)
                runs.append(BlockRun(extent['block'], start, length, uninit))
            else:
                index = EXTENT_INDEX.unpack(node, position)
                leaf = (index['leaf_hi'] << 32) | index['leaf_lo']
                self._check_physical(inode, leaf, 1)
                self._extent_runs(inode, self._read_block(leaf), header['depth'] - 1, runs)

    def _indirect_runs(self, inode: Ext4Inode, nblocks: int) -> List[BlockRun]:
        pointers = np.frombuffer(inode.fields['block'], dtype='<u4').astype(np.int64)
        per_block = self.block_size // 4
        physical: List[int] = []

        def walk(pointer: int, level: int, remaining: int) -> None:
            span = per_block ** level
            if pointer == 0:
                physical.extend([0] * min(remaining, span))
                return
            if level == 0:
                self._check_physical(inode, pointer, 1)
                physical.append(pointer)
                return
            self._check_physical(inode, pointer, 1)
            children = np.frombuffer(self._read_block(pointer), dtype='<u4')
            child_span = per_block ** (level - 1)
            for child in children.tolist():
                left = nblocks - len(physical)
                if left <= 0:
                    return
                walk(child, level - 1, min(left, child_span))

        for i in range(DIRECT_BLOCKS):
            if len(physical) >= nblocks:
                break
            walk(int(pointers[i]), 0, 1)
        for level in (1, 2, 3):
            left = nblocks - len(physical)
            if left <= 0:
                break
            walk(int(pointers[DIRECT_BLOCKS + level - 1]), level, min(left, per_block ** level))
        if len(physical) < nblocks:
            raise CorruptFsError(f"File needs {nblocks} blocks, pointer tree maps {len(physical)}",
                                 inode=inode.ino)

        runs: List[BlockRun] = []
        for logical, block in enumerate(physical[:nblocks]):
            target = block or None
            if runs:
                last = runs[-1]
                if target is None and last.physical is None:
                    runs[-1] = last._replace(count=last.count + 1)
                    continue
                if target is not None and last.physical is not None \
                        and last.physical + last.count == target:
                    runs[-1] = last._replace(count=last.count + 1)
                    continue
            runs.append(BlockRun(logical, target, 1))
        return runs

    def block_runs(self, inode: Ext4Inode) -> List[BlockRun]:
        """
        Logical-to-physical runs covering the whole file, holes included.

        Raises:
            CorruptFsError: On a corrupt extent tree or out-of-volume pointer
        """
        nblocks = -(-inode.size // self.block_size)
        if nblocks == 0 or inode.flags & EXT4_INLINE_DATA_FL:
            return []
        if inode.flags & EXT4_EXTENTS_FL:
            extents: List[BlockRun] = []
            self._extent_runs(inode, inode.fields['block'], MAX_EXTENT_DEPTH, extents)
            extents.sort(key=lambda run: run.logical)
            runs: List[BlockRun] = []
            position = 0
            for run in extents:
                if run.logical >= nblocks:
                    break
                if run.logical < position:
                    raise CorruptFsError("Overlapping extents", inode=inode.ino)
                if run.logical > position:
                    runs.append(BlockRun(position, None, run.logical - position))
                count = min(run.count, nblocks - run.logical)
                runs.append(run._replace(count=count))
                position = run.logical + count
            if position < nblocks:
                runs.append(BlockRun(position, None, nblocks - position))
            return runs
        if inode.kind is FileKind.SYMLINK and inode.fields['blocks_lo'] == 0:
            return []
        return self._indirect_runs(inode, nblocks)

    def _inline_ranges(self, inode: Ext4Inode) -> List[Tuple[int, int]]:
        """Image byte ranges of inline data: i_block, then the system.data xattr value."""
        ranges = [(inode.location + INODE_BLOCK_OFFSET, min(inode.size, INODE_BLOCK_SIZE))]
        if inode.size <= INODE_BLOCK_SIZE or self.inode_size <= GOOD_OLD_INODE_SIZE:
            return ranges
        extra = int.from_bytes(inode.raw[INODE_EXTRA_ISIZE_OFFSET:INODE_EXTRA_ISIZE_OFFSET + 2], 'little')
        base = GOOD_OLD_INODE_SIZE + extra
        if base + 4 > len(inode.raw) or int.from_bytes(inode.raw[base:base + 4], 'little') != XATTR_IBODY_MAGIC:
            raise CorruptFsError("Inline data larger than i_block without a system.data attribute",
                                 inode=inode.ino)
        first = base + 4
        position = first
        while position + XATTR_ENTRY.size <= len(inode.raw):
            entry = XATTR_ENTRY.unpack(inode.raw, position)
            if entry['name_len'] == 0 and entry['name_index'] == 0:
                break
            name = inode.raw[position + XATTR_ENTRY.size:position + XATTR_ENTRY.size + entry['name_len']]
            if entry['name_index'] == XATTR_INDEX_SYSTEM and name == b'data':
                ranges.append((inode.location + first + entry['value_offs'], entry['value_size']))
                return ranges
            position += (XATTR_ENTRY.size + entry['name_len'] + 3) & ~3
        raise CorruptFsError("system.data attribute missing for inline data", inode=inode.ino)

    def _inode(self, ref: InodeRef) -> Ext4Inode:
        return self.read_inode(ref.inode_no)

    def content_extents(self, ref: InodeRef) -> List[Tuple[int, int]]:
        """
        Physical image byte ranges holding the file's content.

        Whole filesystem blocks for block-mapped files; the exact inline
        data bytes for inline-data inodes.
        """
        inode = self._inode(ref)
        if inode.flags & EXT4_INLINE_DATA_FL:
            return [r for r in self._inline_ranges(inode) if r[1] > 0]
        extents = []
        for run in self.block_runs(inode):
            if run.physical is None:
                continue
            extents.append((self.partition_offset + run.physical * self.block_size, run.count * self.block_size))
        return extents

    def logical_extents(self, ref: InodeRef) -> List[Tuple[int, Optional[int], int]]:
        """
        (file offset, image offset, length) runs in file order.

        Holes and uninitialised extents have image offset None since writing
        there would not change what the file reads as.
        """
        inode = self._inode(ref)
        extents: List[Tuple[int, Optional[int], int]] = []
        if inode.flags & EXT4_INLINE_DATA_FL:
            position = 0
            for offset, length in self._inline_ranges(inode):
                extents.append((position, offset, length))
                position += length
            return extents
        for run in self.block_runs(inode):
            offset = None
            if run.physical is not None and not run.uninit:
                offset = self.partition_offset + run.physical * self.block_size
            extents.append((run.logical * self.block_size, offset, run.count * self.block_size))
        return extents

    def file_block_map(self, path: str, ref: Optional[InodeRef] = None) -> FileBlockMap:
        """
        Map a file to dirty-map block addresses.

        Raises:
            PathNotFoundError: If path does not resolve (when ref is not given)
            FilesystemError: If the path is not a regular file
            CorruptFsError: On corrupt block mapping structures
        """
        if ref is None:
            ref = self.resolve(path)
        if not ref.is_regular:
            raise FilesystemError(f"{path} is not a regular file")
        inode = self._inode(ref)
        if inode.flags & EXT4_INLINE_DATA_FL:
            blocks = blocks_for_extents(self.geometry, [(inode.location, self.inode_size)])
            resident = True
        else:
            extents: List[Tuple[Optional[int], int]] = []
            for run in self.block_runs(inode):
                offset = None if run.physical is None else self.partition_offset + run.physical * self.block_size
                extents.append((offset, run.count * self.block_size))
            blocks = blocks_for_extents(self.geometry, extents)
            resident = False
        return FileBlockMap(
            path=path,
            inode_no=ref.inode_no,
            blocks=blocks,
            resident=resident,
            size=ref.size,
            metadata_offset=inode.location,
            metadata_length=self.inode_size,
            geometry=self.geometry,
        )

    def _read_inode_data(self, inode: Ext4Inode) -> bytes:
        size = inode.size
        if inode.flags & EXT4_INLINE_DATA_FL:
            data = b''.join(self.image.read_guest(offset, length) for offset, length in self._inline_ranges(inode))
            return data[:size]
        if inode.kind is FileKind.SYMLINK and not inode.flags & EXT4_EXTENTS_FL \
                and inode.fields['blocks_lo'] == 0:
            return inode.fields['block'][:size]
        content = bytearray(size)
        for run in self.block_runs(inode):
            if run.physical is None or run.uninit:
                continue
            start = run.logical * self.block_size
            length = min(run.count * self.block_size, size - start)
            if length <= 0:
                continue
            content[start:start + length] = self._read(run.physical * self.block_size, length)
        return bytes(content)

    def read_file(self, ref: InodeRef) -> bytes:
        """Content of a file truncated to its size; holes read as zeros."""
        return self._read_inode_data(self._inode(ref))

    # Directories and paths

    def _parse_entries(self, data: bytes, ino: int, chunk: int) -> List[Tuple[str, int, int]]:
        entries = []
        for block_start in range(0, len(data), chunk):
            block = data[block_start:block_start + chunk]
            position = 0
            while position + DIR_ENTRY.size <= len(block):
                entry = DIR_ENTRY.unpack(block, position)
                rec_len = entry['rec_len']
                if rec_len < DIR_ENTRY.size or position + rec_len > len(block) or rec_len % 4:
                    raise CorruptFsError(f"Bad directory record length {rec_len}", inode=ino)
                name_len = entry['name_len']
                if entry['inode'] and name_len:
                    if DIR_ENTRY.size + name_len > rec_len:
                        raise CorruptFsError("Directory entry name overruns its record", inode=ino)
                    raw_name = block[position + DIR_ENTRY.size:position + DIR_ENTRY.size + name_len]
                    file_type = entry['file_type'] if self.has_filetype else 0
                    entries.append((raw_name.decode('utf-8', errors='surrogateescape'), entry['inode'], file_type))
                position += rec_len
        return entries

    def directory_entries(self, ino: int) -> List[Tuple[str, int, int]]:
        """
        (name, inode, file_type) entries of a directory, read linearly.

        Hash-tree directories are read through their leaf blocks; index
        blocks look like empty records and are skipped.
        """
        cached = self._dir_cache.get(ino)
        if cached is not None:
            return cached
        inode = self.read_inode(ino)
        if inode.kind is not FileKind.DIRECTORY:
            raise FilesystemError(f"Inode {ino} is not a directory")
        data = self._read_inode_data(inode)
        if inode.flags & EXT4_INLINE_DATA_FL:
            parent = int.from_bytes(data[:4], 'little')
            entries = [('..', parent, 2)]
            body = data[4:]
            if body:
                entries += self._parse_entries(body, ino, len(body))
        else:
            entries = self._parse_entries(data, ino, self.block_size)
        self._dir_cache[ino] = entries
        return entries

    def normalize_path(self, path: str) -> str:
        return normalize_guest_path(self.fs_type, path)

    def resolve(self, path: str) -> InodeRef:
        """
        Walk the directory tree from the root inode to path.

        Raises:
            PathNotFoundError: If any component is missing or not a directory
        """
        ino = ROOT_INO
        for component in self.normalize_path(path).split('/'):
            if not component:
                continue
            if self.read_inode(ino).kind is not FileKind.DIRECTORY:
                raise PathNotFoundError(path)
            for name, child, _file_type in self.directory_entries(ino):
                if name == component:
                    ino = child
                    break
            else:
                raise PathNotFoundError(path)
        return self.inode_ref(ino)

    def list_all_files(self) -> List[Tuple[str, InodeRef]]:
        """
        Every regular file and symlink, by recursive walk from the root.

        Symlinks are listed, never followed.

        Raises:
            CorruptFsError: If a directory is reachable twice (loop)
        """
        results: List[Tuple[str, InodeRef]] = []
        visited = {ROOT_INO}
        stack = [('/', ROOT_INO)]
        while stack:
            dir_path, dir_ino = stack.pop()
            for name, child, _file_type in self.directory_entries(dir_ino):
                if name in ('.', '..'):
                    continue
                child_path = posixpath.join(dir_path, name)
                ref = self.inode_ref(child)
                if ref.is_dir:
                    if child in visited:
                        raise CorruptFsError(f"Directory loop at {child_path}", inode=child)
                    visited.add(child)
                    stack.append((child_path, child))
                elif ref.kind in (FileKind.REGULAR, FileKind.SYMLINK):
                    results.append((child_path, ref))
        results.sort(key=lambda item: item[0])
        return results


def mount_ext4(image: ImageHandle, partition_offset: int, geometry: Optional[ImageGeometry] = None) -> Ext4Fs:
    """
    Mount an EXT2/3/4 filesystem read-only.

    Raises:
        BadMagicError: If there is no EXT superblock at partition_offset + 1024
        UnsupportedFeatureError: If an incompatible feature changes the on-disk layout
    """
    if geometry is None:
        geometry = ImageGeometry.for_image(image.virtual_size, partition_offset)
    fs = Ext4Fs(image, partition_offset, geometry)
    logger.debug("Mounted %r", fs)
    return fs


def resolve_path(fs: Ext4Fs, path: str) -> InodeRef:
    return fs.resolve(path)


def file_block_addresses(fs: Ext4Fs, inode: InodeRef, path: str = '') -> FileBlockMap:
    return fs.file_block_map(path, inode)


def read_file(fs: Ext4Fs, inode: InodeRef) -> bytes:
    return fs.read_file(inode)


def list_all_files(fs: Ext4Fs) -> List[Tuple[str, InodeRef]]:
    return fs.list_all_files()
