"""
Fixture image builders for the vmscan tests.

Each builder lays out a filesystem byte for byte in memory and remembers
where everything landed (inode or MFT record location, content blocks or
clusters, expected content). Tests check the readers against that record
instead of an external imaging tool.
"""

import math
import posixpath
import struct
import uuid
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from ..services.filesystem import fold_name
from ..services.fs_ext4 import (
    DIR_ENTRY,
    EXT4_EXTENTS_FL,
    EXT4_INLINE_DATA_FL,
    EXT_INIT_MAX_LEN,
    EXT_SUPER_MAGIC,
    EXTENT,
    EXTENT_HEADER,
    EXTENT_INDEX,
    EXTENT_MAGIC,
    GOOD_OLD_INODE_SIZE,
    INCOMPAT_EXTENTS,
    INCOMPAT_FILETYPE,
    INCOMPAT_INLINE_DATA,
    INODE,
    INODE_EXTRA_ISIZE_OFFSET,
    ROOT_INO,
    S_IFDIR,
    S_IFLNK,
    S_IFREG,
    SUPERBLOCK,
    XATTR_ENTRY,
    XATTR_IBODY_MAGIC,
    XATTR_INDEX_SYSTEM,
)
from ..services.fs_ntfs import (
    ATTR_DATA,
    ATTR_FILE_NAME,
    ATTR_FLAG_SPARSE,
    ATTR_HEADER,
    ATTR_STANDARD_INFORMATION,
    BOOT_SECTOR,
    FILE_NAME,
    FILE_RECORD,
    FIXUP_STRIDE,
    NAMESPACE_DOS,
    NAMESPACE_WIN32,
    NAMESPACE_WIN32_DOS,
    NONRESIDENT_HEADER,
    RECORD_IN_USE,
    RECORD_IS_DIRECTORY,
    RESIDENT_HEADER,
    ROOT_RECORD,
)
from ..services.image import (
    EXT_BACKING_FORMAT,
    GPT_ENTRY,
    GPT_HEADER,
    MBR_ENTRY,
    QCOW2_EXTENSION,
    QCOW2_HEADER_V2,
    QCOW2_HEADER_V3,
    QCOW2_MAGIC,
    QCOW2_V2_HEADER_LENGTH,
    QCOW2_V3_HEADER_LENGTH,
    QCOW_OFLAG_COMPRESSED,
    QCOW_OFLAG_COPIED,
    QCOW_OFLAG_ZERO,
    Struct,
)

SECTOR = 512
BASE_TIME = 1_600_000_000
LINUX_FS_GUID = uuid.UUID('0fc63daf-8483-4772-8e79-3d69d8477de4')


def pack(layout: Struct, **values) -> bytes:
    """Pack a Struct, leaving every field not given at zero."""
    fields = layout.unpack(bytes(layout.size))
    fields.update(values)
    return layout.pack(**fields)


def align(value: int, boundary: int) -> int:
    return -(-value // boundary) * boundary


def save_image(path: Union[str, Path], data: Union[bytes, bytearray]) -> Path:
    path = Path(path)
    path.write_bytes(bytes(data))
    return path


# EXT4

FIRST_INO = 11
FILE_TYPES = {'file': 1, 'dir': 2, 'symlink': 7}
EXTENTS_IN_INODE = 4
EXTRA_ISIZE = 32
XATTR_FIRST_ENTRY = GOOD_OLD_INODE_SIZE + EXTRA_ISIZE + 4
XATTR_DATA_NAME = b'data'
XATTR_VALUES_START = XATTR_FIRST_ENTRY + ((XATTR_ENTRY.size + len(XATTR_DATA_NAME) + 3) & ~3) + 4
INLINE_BLOCK_BYTES = 60
UNINIT_FILL = b'\xa5'


@dataclass
class Ext4Node:
    """One inode of the fixture and where its pieces live."""
    ino: int
    kind: str
    parent: int
    name: str
    mapping: str = 'extents'
    data: bytearray = field(default_factory=bytearray)
    blocks: List[Optional[int]] = field(default_factory=list)
    uninit: Set[int] = field(default_factory=set)
    children: Dict[str, int] = field(default_factory=dict)
    meta: Dict[int, bytes] = field(default_factory=dict)
    i_block: bytes = bytes(INLINE_BLOCK_BYTES)
    mtime: int = BASE_TIME
    deleted: bool = False


class Ext4ImageBuilder:
    """
    Builds EXT2/EXT4 filesystem images.

    Files are mapped through extent trees ('extents'), classic indirect
    pointers ('indirect') or inline data ('inline'). Every block is
    allocated when a file is added and never moves afterwards, so rendering
    before and after a change gives the exact bytes a guest would write.
    """

    def __init__(self, block_size: int = 4096, blocks_count: int = 4096,
                 blocks_per_group: Optional[int] = None, inodes_per_group: int = 512,
                 inode_size: int = 256, mapping: str = 'extents', inline_data: bool = False):
        if block_size not in (1024, 2048, 4096):
            raise ValueError(f"Unsupported block size {block_size}")
        if mapping not in ('extents', 'indirect'):
            raise ValueError(f"Unknown default mapping {mapping!r}")
        self.block_size = block_size
        self.blocks_count = blocks_count
        self.first_data_block = 1 if block_size == 1024 else 0
        self.blocks_per_group = blocks_per_group or block_size * 8
        self.inodes_per_group = inodes_per_group
        self.inode_size = inode_size
        self.mapping = mapping
        self.inline_data = inline_data
        self.groups = -(-(blocks_count - self.first_data_block) // self.blocks_per_group)
        gdt_blocks = -(-self.groups * 32 // block_size)
        self.table_blocks = -(-inodes_per_group * inode_size // block_size)
        self.inode_table_start = self.first_data_block + 1 + gdt_blocks
        self._next_block = self.inode_table_start + self.groups * self.table_blocks
        self._next_ino = FIRST_INO
        self._clock = BASE_TIME
        self.nodes: Dict[int, Ext4Node] = {}

        root = Ext4Node(ino=ROOT_INO, kind='dir', parent=ROOT_INO, name='', mapping=mapping)
        self.nodes[ROOT_INO] = root
        root.blocks = self._allocate(1)
        self._map_blocks(root)
        self.add_dir('/lost+found')

    @property
    def inodes_count(self) -> int:
        return self.groups * self.inodes_per_group

    @property
    def inline_capacity(self) -> int:
        if self.inode_size <= XATTR_VALUES_START:
            return INLINE_BLOCK_BYTES
        return INLINE_BLOCK_BYTES + (self.inode_size - XATTR_VALUES_START)

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def _allocate(self, count: int) -> List[int]:
        start = self._next_block
        if start + count > self.blocks_count:
            raise ValueError(f"Fixture is out of space ({self.blocks_count} blocks)")
        self._next_block += count
        return list(range(start, start + count))

    def _allocate_fragments(self, count: int, fragments: int) -> List[int]:
        blocks: List[int] = []
        for size in (len(part) for part in np.array_split(np.arange(count), max(1, fragments))):
            if size == 0:
                continue
            blocks.extend(self._allocate(int(size)))
            self._allocate(1)
        return blocks

    # Tree

    def _split(self, path: str) -> Tuple[str, str]:
        path = posixpath.normpath('/' + path.lstrip('/'))
        parent, name = posixpath.split(path)
        if not name:
            raise ValueError("The root directory already exists")
        return parent, name

    def lookup(self, path: str) -> Ext4Node:
        node = self.nodes[ROOT_INO]
        for component in posixpath.normpath('/' + path.lstrip('/')).split('/'):
            if not component:
                continue
            if node.kind != 'dir' or component not in node.children:
                raise KeyError(path)
            node = self.nodes[node.children[component]]
        return node

    def _new_node(self, path: str, kind: str, mapping: str) -> Ext4Node:
        parent_path, name = self._split(path)
        parent = self.lookup(parent_path)
        if parent.kind != 'dir':
            raise ValueError(f"{parent_path} is not a directory")
        if name in parent.children:
            raise ValueError(f"{path} already exists")
        if self._next_ino > self.inodes_count:
            raise ValueError("Fixture is out of inodes")
        if mapping == 'inline' and not self.inline_data:
            raise ValueError("Inline data needs inline_data=True")
        node = Ext4Node(ino=self._next_ino, kind=kind, parent=parent.ino, name=name,
                        mapping=mapping, mtime=self._tick())
        self._next_ino += 1
        self.nodes[node.ino] = node
        parent.children[name] = node.ino
        parent.mtime = self._tick()
        return node

    def add_dir(self, path: str, inline: bool = False) -> int:
        """Create a directory of one block (or inline in the inode)."""
        node = self._new_node(path, 'dir', 'inline' if inline else self.mapping)
        if not inline:
            node.blocks = self._allocate(1)
            self._map_blocks(node)
        return node.ino

    def makedirs(self, path: str) -> int:
        node = self.nodes[ROOT_INO]
        current = ''
        for component in posixpath.normpath('/' + path.lstrip('/')).split('/'):
            if not component:
                continue
            current += '/' + component
            if component not in node.children:
                self.add_dir(current)
            node = self.nodes[node.children[component]]
        return node.ino

    def add_file(self, path: str, data: bytes, mapping: Optional[str] = None,
                 holes: Iterable[int] = (), uninit: Iterable[int] = (), fragments: int = 1) -> int:
        """
        Create a regular file.

        Args:
            path: Absolute guest path (parent directories must exist)
            data: Content; bytes inside holes and uninitialised blocks are dropped
            mapping: 'extents', 'indirect' or 'inline' (default: builder mapping)
            holes: Logical blocks left unallocated
            uninit: Logical blocks allocated as uninitialised extents
            fragments: Number of physically separate pieces

        Returns:
            Inode number
        """
        mapping = mapping or self.mapping
        holes, uninit = set(holes), set(uninit)
        if uninit and mapping != 'extents':
            raise ValueError("Uninitialised blocks need extent mapping")
        if mapping == 'inline' and len(data) > self.inline_capacity:
            raise ValueError(f"{len(data)} bytes do not fit inline ({self.inline_capacity})")
        node = self._new_node(path, 'file', mapping)
        content = bytearray(data)
        if mapping == 'inline':
            node.data = content
            return node.ino

        bs = self.block_size
        nblocks = -(-len(content) // bs)
        for block in (holes | uninit):
            start = block * bs
            content[start:start + bs] = bytes(len(content[start:start + bs]))
        wanted = [b for b in range(nblocks) if b not in holes]
        physical = iter(self._allocate_fragments(len(wanted), fragments))
        node.blocks = [None if b in holes else next(physical) for b in range(nblocks)]
        node.uninit = uninit - holes
        node.data = content
        self._map_blocks(node)
        return node.ino

    def add_symlink(self, path: str, target: str) -> int:
        raw = target.encode('utf-8')
        if len(raw) >= INLINE_BLOCK_BYTES:
            raise ValueError("Only fast symlinks are supported")
        node = self._new_node(path, 'symlink', 'fast')
        node.data = bytearray(raw)
        node.i_block = raw.ljust(INLINE_BLOCK_BYTES, b'\0')
        return node.ino

    def overwrite(self, path: str, offset: int, data: bytes) -> None:
        """Rewrite bytes inside a file's existing allocated content."""
        node = self.lookup(path)
        if node.kind != 'file':
            raise ValueError(f"{path} is not a regular file")
        if offset + len(data) > len(node.data):
            raise ValueError(f"Write past the end of {path}")
        bs = self.block_size
        if node.mapping != 'inline':
            for block in range(offset // bs, (offset + len(data) - 1) // bs + 1):
                if node.blocks[block] is None or block in node.uninit:
                    raise ValueError(f"{path} block {block} is not backed by initialised data")
        node.data[offset:offset + len(data)] = data
        node.mtime = self._tick()

    def touch(self, path: str) -> None:
        """Change only the inode (as an access time update does)."""
        self.lookup(path).mtime = self._tick()

    def remove(self, path: str) -> None:
        node = self.lookup(path)
        if node.ino == ROOT_INO:
            raise ValueError("Cannot remove the root directory")
        parent = self.nodes[node.parent]
        del parent.children[node.name]
        parent.mtime = self._tick()
        node.deleted = True

    # Oracles

    def path_of(self, node: Ext4Node) -> str:
        parts = []
        while node.ino != ROOT_INO:
            parts.append(node.name)
            node = self.nodes[node.parent]
        return '/' + '/'.join(reversed(parts))

    def files(self) -> Dict[str, bytes]:
        """Expected content of every live regular file by path."""
        return {self.path_of(node): bytes(node.data) for node in self.nodes.values()
                if node.kind == 'file' and not node.deleted}

    def inode_offset(self, path: str) -> int:
        """Filesystem-relative byte offset of a file's inode."""
        group, index = divmod(self.lookup(path).ino - 1, self.inodes_per_group)
        table = self.inode_table_start + group * self.table_blocks
        return table * self.block_size + index * self.inode_size

    def file_blocks(self, path: str) -> List[Optional[int]]:
        """Filesystem blocks of a file in logical order, None for holes."""
        return list(self.lookup(path).blocks)

    # Block mapping structures

    def _map_blocks(self, node: Ext4Node) -> None:
        node.meta = {}
        if node.mapping == 'extents':
            node.i_block = self._extent_tree(node)
        else:
            node.i_block = self._indirect_pointers(node)

    def _extents(self, node: Ext4Node) -> List[Tuple[int, int, int, bool]]:
        extents: List[Tuple[int, int, int, bool]] = []
        for logical, physical in enumerate(node.blocks):
            if physical is None:
                continue
            uninit = logical in node.uninit
            limit = EXT_INIT_MAX_LEN - 1 if uninit else EXT_INIT_MAX_LEN
            if extents:
                first, start, count, last_uninit = extents[-1]
                if first + count == logical and start + count == physical \
                        and last_uninit == uninit and count < limit:
                    extents[-1] = (first, start, count + 1, uninit)
                    continue
            extents.append((logical, physical, 1, uninit))
        return extents

    @staticmethod
    def _extent_entry(logical: int, physical: int, count: int, uninit: bool) -> bytes:
        return pack(EXTENT, block=logical, len=count + (EXT_INIT_MAX_LEN if uninit else 0),
                    start_hi=physical >> 32, start_lo=physical & 0xFFFFFFFF)

    def _extent_tree(self, node: Ext4Node) -> bytes:
        extents = self._extents(node)
        if len(extents) <= EXTENTS_IN_INODE:
            root = pack(EXTENT_HEADER, magic=EXTENT_MAGIC, entries=len(extents), max=EXTENTS_IN_INODE)
            root += b''.join(self._extent_entry(*extent) for extent in extents)
            return root.ljust(INLINE_BLOCK_BYTES, b'\0')

        per_leaf = (self.block_size - EXTENT_HEADER.size) // EXTENT.size
        leaves = [extents[i:i + per_leaf] for i in range(0, len(extents), per_leaf)]
        if len(leaves) > EXTENTS_IN_INODE:
            raise ValueError("Extent tree deeper than one index level")
        root = pack(EXTENT_HEADER, magic=EXTENT_MAGIC, entries=len(leaves), max=EXTENTS_IN_INODE, depth=1)
        for leaf in leaves:
            block = self._allocate(1)[0]
            raw = pack(EXTENT_HEADER, magic=EXTENT_MAGIC, entries=len(leaf), max=per_leaf)
            raw += b''.join(self._extent_entry(*extent) for extent in leaf)
            node.meta[block] = raw.ljust(self.block_size, b'\0')
            root += pack(EXTENT_INDEX, block=leaf[0][0], leaf_lo=block & 0xFFFFFFFF, leaf_hi=block >> 32)
        return root.ljust(INLINE_BLOCK_BYTES, b'\0')

    def _indirect_block(self, node: Ext4Node, pointers: List[int], level: int) -> int:
        if not any(pointers):
            return 0
        per_block = self.block_size // 4
        block = self._allocate(1)[0]
        if level == 1:
            children = pointers
        else:
            span = per_block ** (level - 1)
            children = [self._indirect_block(node, pointers[i:i + span], level - 1)
                        for i in range(0, len(pointers), span)]
        table = np.zeros(per_block, dtype='<u4')
        table[:len(children)] = children
        node.meta[block] = table.tobytes()
        return block

    def _indirect_pointers(self, node: Ext4Node) -> bytes:
        pointers = [block or 0 for block in node.blocks]
        per_block = self.block_size // 4
        i_block = pointers[:12] + [0] * (12 - len(pointers[:12]))
        position = 12
        for level in (1, 2, 3):
            span = per_block ** level
            i_block.append(self._indirect_block(node, pointers[position:position + span], level))
            position += span
        if position < len(pointers):
            raise ValueError("File too large for triple indirect mapping")
        return np.array(i_block, dtype='<u4').tobytes()

    # Rendering

    def _directory_entries(self, node: Ext4Node, size: int, dots: bool) -> bytes:
        entries = [('.', node.ino, 2), ('..', node.parent, 2)] if dots else []
        entries += [(name, ino, FILE_TYPES[self.nodes[ino].kind]) for name, ino in sorted(node.children.items())]
        records = []
        used = 0
        for name, ino, file_type in entries:
            raw_name = name.encode('utf-8')
            rec_len = align(DIR_ENTRY.size + len(raw_name), 4)
            records.append([ino, rec_len, raw_name, file_type])
            used += rec_len
        if used > size:
            raise ValueError(f"Directory {self.path_of(node)} does not fit in {size} bytes")
        if not records:
            records.append([0, size, b'', 0])
        else:
            records[-1][1] += size - used
        return b''.join(
            pack(DIR_ENTRY, inode=ino, rec_len=rec_len, name_len=len(raw_name), file_type=file_type)
            + raw_name.ljust(rec_len - DIR_ENTRY.size, b'\0')
            for ino, rec_len, raw_name, file_type in records
        )

    def _content(self, node: Ext4Node) -> bytes:
        if node.kind != 'dir':
            return bytes(node.data)
        if node.mapping == 'inline':
            body = self._directory_entries(node, INLINE_BLOCK_BYTES - 4, dots=False)
            return struct.pack('<I', node.parent) + body
        return self._directory_entries(node, self.block_size, dots=True)

    def _inode(self, node: Ext4Node, content: bytes) -> bytes:
        mode = {'file': S_IFREG | 0o644, 'dir': S_IFDIR | 0o755, 'symlink': S_IFLNK | 0o777}[node.kind]
        flags = 0
        i_block = node.i_block
        if node.mapping == 'extents':
            flags |= EXT4_EXTENTS_FL
        elif node.mapping == 'inline':
            flags |= EXT4_INLINE_DATA_FL
            i_block = content[:INLINE_BLOCK_BYTES].ljust(INLINE_BLOCK_BYTES, b'\0')
        allocated = sum(1 for b in node.blocks if b is not None) + len(node.meta)
        links = 2 + sum(1 for ino in node.children.values() if self.nodes[ino].kind == 'dir') \
            if node.kind == 'dir' else 1
        raw = bytearray(pack(
            INODE, mode=mode, size_lo=len(content) & 0xFFFFFFFF, atime=node.mtime, ctime=node.mtime,
            mtime=node.mtime, dtime=node.mtime if node.deleted else 0, links_count=0 if node.deleted else links,
            blocks_lo=allocated * self.block_size // SECTOR, flags=flags, block=i_block,
            size_high=len(content) >> 32 if node.kind == 'file' else 0,
        )).ljust(self.inode_size, b'\0')
        if self.inode_size > GOOD_OLD_INODE_SIZE:
            struct.pack_into('<H', raw, INODE_EXTRA_ISIZE_OFFSET, EXTRA_ISIZE)
        if node.mapping == 'inline' and self.inode_size > XATTR_VALUES_START:
            value = content[INLINE_BLOCK_BYTES:]
            value_start = self.inode_size - align(len(value), 4)
            struct.pack_into('<I', raw, XATTR_FIRST_ENTRY - 4, XATTR_IBODY_MAGIC)
            entry = pack(XATTR_ENTRY, name_len=len(XATTR_DATA_NAME), name_index=XATTR_INDEX_SYSTEM,
                         value_offs=value_start - XATTR_FIRST_ENTRY, value_size=len(value))
            raw[XATTR_FIRST_ENTRY:XATTR_FIRST_ENTRY + len(entry) + 4] = entry + XATTR_DATA_NAME
            raw[value_start:value_start + len(value)] = value
        return bytes(raw)

    def _superblock(self) -> bytes:
        incompat = INCOMPAT_FILETYPE
        if any(node.mapping == 'extents' for node in self.nodes.values()):
            incompat |= INCOMPAT_EXTENTS
        if self.inline_data:
            incompat |= INCOMPAT_INLINE_DATA
        log_size = self.block_size.bit_length() - 11
        return pack(
            SUPERBLOCK,
            inodes_count=self.inodes_count,
            blocks_count_lo=self.blocks_count,
            free_blocks_count_lo=self.blocks_count - self._next_block,
            free_inodes_count=self.inodes_count - self._next_ino + 1,
            first_data_block=self.first_data_block,
            log_block_size=log_size,
            log_cluster_size=log_size,
            blocks_per_group=self.blocks_per_group,
            clusters_per_group=self.blocks_per_group,
            inodes_per_group=self.inodes_per_group,
            wtime=self._clock,
            magic=EXT_SUPER_MAGIC,
            state=1,
            errors=1,
            rev_level=1,
            first_ino=FIRST_INO,
            inode_size=self.inode_size,
            feature_incompat=incompat,
            uuid=uuid.UUID(int=0x5EED).bytes,
            volume_name=b'vmscan-fixture'.ljust(16, b'\0'),
        )

    def render(self) -> bytearray:
        """The filesystem image as it stands now."""
        bs = self.block_size
        image = bytearray(self.blocks_count * bs)
        superblock = self._superblock()
        image[1024:1024 + len(superblock)] = superblock
        gdt = (self.first_data_block + 1) * bs
        for group in range(self.groups):
            struct.pack_into('<III', image, gdt + group * 32, 0, 0,
                             self.inode_table_start + group * self.table_blocks)

        for node in self.nodes.values():
            content = self._content(node)
            group, index = divmod(node.ino - 1, self.inodes_per_group)
            location = (self.inode_table_start + group * self.table_blocks) * bs + index * self.inode_size
            image[location:location + self.inode_size] = self._inode(node, content)
            for logical, physical in enumerate(node.blocks):
                if physical is None:
                    continue
                chunk = content[logical * bs:(logical + 1) * bs]
                if logical in node.uninit:
                    chunk = UNINIT_FILL * len(chunk)
                image[physical * bs:physical * bs + len(chunk)] = chunk
            for block, raw in node.meta.items():
                image[block * bs:(block + 1) * bs] = raw
        return image


def populate_ext4(builder: Ext4ImageBuilder, count: int, rng: np.random.Generator,
                  max_size: int = 24 * 1024, per_dir: int = 40) -> List[str]:
    """Fill a fixture with count random files spread over a few directories."""
    paths = []
    for i in range(count):
        directory = f'/srv/d{i // per_dir:02d}'
        builder.makedirs(directory)
        path = f'{directory}/f{i:04d}.bin'
        builder.add_file(path, rng.bytes(int(rng.integers(1, max_size))))
        paths.append(path)
    return paths


# NTFS

MFT_RECORD_NO = 0
FIRST_USER_RECORD = 24
METAFILES = {1: '$MFTMirr', 2: '$LogFile', 3: '$Volume', 6: '$Bitmap'}
FILE_NAME_DIRECTORY = 0x10000000
ATTR_INDEX_ROOT = 0x90
STANDARD_INFORMATION = struct.Struct('<QQQQI12x')
USA_OFFSET = 48
FIXUP_CHECK = b'\x01\x00'


def _signed_size(value: int) -> int:
    size = 1
    while not -(1 << (8 * size - 1)) <= value < (1 << (8 * size - 1)):
        size += 1
    return size


def encode_run_list(runs: Sequence[Tuple[int, Optional[int]]]) -> bytes:
    """
    Encode (count, lcn or None for sparse) runs as NTFS mapping pairs.

    The inverse of decode_run_list, terminator included.
    """
    raw = bytearray()
    previous = 0
    for count, lcn in runs:
        count_raw = count.to_bytes(max(1, (count.bit_length() + 7) // 8), 'little')
        if lcn is None:
            raw.append(len(count_raw))
            raw += count_raw
            continue
        delta = lcn - previous
        delta_raw = delta.to_bytes(_signed_size(delta), 'little', signed=True)
        raw.append((len(delta_raw) << 4) | len(count_raw))
        raw += count_raw + delta_raw
        previous = lcn
    raw.append(0)
    return bytes(raw)


def clusters_to_runs(clusters: Sequence[Optional[int]]) -> List[Tuple[int, Optional[int]]]:
    runs: List[Tuple[int, Optional[int]]] = []
    for lcn in clusters:
        if runs:
            count, start = runs[-1]
            if lcn is None and start is None:
                runs[-1] = (count + 1, None)
                continue
            if lcn is not None and start is not None and start + count == lcn:
                runs[-1] = (count + 1, start)
                continue
        runs.append((1, lcn))
    return runs


@dataclass
class NtfsNode:
    """One MFT record of the fixture."""
    record_no: int
    name: str
    parent: int
    is_dir: bool = False
    data: Optional[bytearray] = None
    clusters: List[Optional[int]] = field(default_factory=list)
    resident: bool = True
    initialized_size: Optional[int] = None
    dos_name: Optional[str] = None
    streams: Dict[str, bytes] = field(default_factory=dict)
    mtime: int = BASE_TIME
    in_use: bool = True


class NtfsImageBuilder:
    """
    Builds NTFS volumes: boot sector, a (possibly fragmented) MFT with
    fixed-up FILE records, and resident or run-list mapped file data.
    """

    def __init__(self, cluster_size: int = 4096, total_clusters: int = 1024, record_count: int = 64,
                 record_size: int = 1024, mft_fragments: int = 1):
        if cluster_size % SECTOR or cluster_size < SECTOR:
            raise ValueError(f"Invalid cluster size {cluster_size}")
        self.cluster_size = cluster_size
        self.total_clusters = total_clusters
        self.record_count = record_count
        self.record_size = record_size
        self._next_cluster = 1
        self._next_record = FIRST_USER_RECORD
        self._clock = BASE_TIME
        mirror_bytes = 4 * record_size
        self.mirror_clusters = self._allocate(-(-mirror_bytes // cluster_size))
        mft_clusters = -(-record_count * record_size // cluster_size)
        self.mft_clusters = self._allocate_fragments(mft_clusters, mft_fragments)
        self.nodes: Dict[int, NtfsNode] = {
            MFT_RECORD_NO: NtfsNode(MFT_RECORD_NO, '$MFT', ROOT_RECORD, resident=False),
            ROOT_RECORD: NtfsNode(ROOT_RECORD, '.', ROOT_RECORD, is_dir=True),
        }
        for record_no, name in METAFILES.items():
            self.nodes[record_no] = NtfsNode(record_no, name, ROOT_RECORD, data=bytearray())

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def _allocate(self, count: int) -> List[int]:
        start = self._next_cluster
        if start + count > self.total_clusters:
            raise ValueError(f"Fixture is out of space ({self.total_clusters} clusters)")
        self._next_cluster += count
        return list(range(start, start + count))

    def _allocate_fragments(self, count: int, fragments: int, reverse: bool = False) -> List[int]:
        sizes = [len(part) for part in np.array_split(np.arange(count), max(1, fragments)) if len(part)]
        pieces: List[List[int]] = [[] for _ in sizes]
        order = list(range(len(sizes)))
        if reverse:
            order.reverse()
        for index in order:
            pieces[index] = self._allocate(sizes[index])
            self._allocate(1)
        return [lcn for piece in pieces for lcn in piece]

    # Tree

    @staticmethod
    def _components(path: str) -> List[str]:
        return [p for p in path.replace('/', '\\').split('\\') if p]

    def _children(self, record_no: int) -> Dict[str, int]:
        return {fold_name(node.name): node.record_no for node in self.nodes.values()
                if node.in_use and node.parent == record_no and node.record_no != ROOT_RECORD}

    def lookup(self, path: str) -> NtfsNode:
        record_no = ROOT_RECORD
        for component in self._components(path):
            child = self._children(record_no).get(fold_name(component))
            if child is None:
                raise KeyError(path)
            record_no = child
        return self.nodes[record_no]

    def _new_node(self, path: str, **kwargs) -> NtfsNode:
        components = self._components(path)
        if not components:
            raise ValueError("The root directory already exists")
        parent = self.lookup('\\'.join(components[:-1]))
        if not parent.is_dir:
            raise ValueError(f"Parent of {path} is not a directory")
        if fold_name(components[-1]) in self._children(parent.record_no):
            raise ValueError(f"{path} already exists")
        if self._next_record >= self.record_count:
            raise ValueError("MFT is full")
        node = NtfsNode(self._next_record, components[-1], parent.record_no, mtime=self._tick(), **kwargs)
        self._next_record += 1
        self.nodes[node.record_no] = node
        self._record_bytes(node)
        return node

    def add_dir(self, path: str) -> int:
        return self._new_node(path, is_dir=True).record_no

    def makedirs(self, path: str) -> int:
        current = []
        record_no = ROOT_RECORD
        for component in self._components(path):
            current.append(component)
            child = self._children(record_no).get(fold_name(component))
            record_no = child if child is not None else self.add_dir('\\'.join(current))
        return record_no

    def add_file(self, path: str, data: bytes, resident: Optional[bool] = None, fragments: int = 1,
                 reverse: bool = False, sparse: Iterable[int] = (), initialized_size: Optional[int] = None,
                 dos_name: Optional[str] = None, streams: Optional[Dict[str, bytes]] = None) -> int:
        """
        Create a file.

        Args:
            path: Backslash (or slash) separated path; parent directories must exist
            data: Content
            resident: Keep the data inside the MFT record (default: when 512 bytes or less)
            fragments: Number of separate cluster runs
            reverse: Place later runs at lower cluster numbers (negative run deltas)
            sparse: Cluster indexes of the file left sparse
            initialized_size: Bytes actually written; the rest reads as zeros
            dos_name: Add a short DOS name next to the long one
            streams: Named (alternate) data streams, stored resident

        Returns:
            MFT record number
        """
        content = bytearray(data)
        if resident is None:
            resident = len(content) <= 512
        if resident:
            node = self._new_node(path, data=content, resident=True, dos_name=dos_name, streams=dict(streams or {}))
            return node.record_no

        cs = self.cluster_size
        sparse = set(sparse)
        count = -(-len(content) // cs)
        for index in sparse:
            content[index * cs:(index + 1) * cs] = bytes(len(content[index * cs:(index + 1) * cs]))
        wanted = [i for i in range(count) if i not in sparse]
        physical = iter(self._allocate_fragments(len(wanted), fragments, reverse))
        clusters = [None if i in sparse else next(physical) for i in range(count)]
        node = self._new_node(path, data=content, clusters=clusters, resident=False,
                              initialized_size=initialized_size, dos_name=dos_name,
                              streams=dict(streams or {}))
        return node.record_no

    def overwrite(self, path: str, offset: int, data: bytes) -> None:
        node = self.lookup(path)
        if node.is_dir or offset + len(data) > len(node.data):
            raise ValueError(f"Cannot overwrite {path} at {offset}+{len(data)}")
        if not node.resident:
            cs = self.cluster_size
            for index in range(offset // cs, (offset + len(data) - 1) // cs + 1):
                if node.clusters[index] is None:
                    raise ValueError(f"{path} cluster {index} is sparse")
        node.data[offset:offset + len(data)] = data
        node.mtime = self._tick()

    def touch(self, path: str) -> None:
        self.lookup(path).mtime = self._tick()

    def remove(self, path: str) -> None:
        node = self.lookup(path)
        if node.record_no < FIRST_USER_RECORD:
            raise ValueError("Cannot remove a metafile")
        node.in_use = False

    # Oracles

    def path_of(self, node: NtfsNode) -> str:
        parts = []
        while node.record_no != ROOT_RECORD:
            parts.append(node.name)
            node = self.nodes[node.parent]
        return '\\' + '\\'.join(reversed(parts))

    def expected_content(self, node: NtfsNode) -> bytes:
        content = bytearray(node.data)
        if not node.resident and node.initialized_size is not None:
            content[node.initialized_size:] = bytes(len(content) - node.initialized_size)
        return bytes(content)

    def files(self) -> Dict[str, bytes]:
        """Expected content of every live user file by path."""
        return {self.path_of(node): self.expected_content(node) for node in self.nodes.values()
                if node.in_use and not node.is_dir and node.record_no >= FIRST_USER_RECORD}

    def record_offset(self, record_no: int) -> int:
        """Volume-relative byte offset where a record starts."""
        cluster, intra = divmod(record_no * self.record_size, self.cluster_size)
        return self.mft_clusters[cluster] * self.cluster_size + intra

    def file_clusters(self, path: str) -> List[Optional[int]]:
        return list(self.lookup(path).clusters)

    # Records

    def _resident_attribute(self, type_code: int, value: bytes, attr_id: int, name: str = '',
                            indexed: int = 0) -> bytes:
        raw_name = name.encode('utf-16-le')
        value_offset = align(ATTR_HEADER.size + 8 + len(raw_name), 8)
        length = align(value_offset + len(value), 8)
        raw = bytearray(length)
        raw[:ATTR_HEADER.size] = pack(ATTR_HEADER, type=type_code, length=length, name_length=len(raw_name) // 2,
                                      name_offset=ATTR_HEADER.size + 8, attr_id=attr_id)
        raw[ATTR_HEADER.size:ATTR_HEADER.size + RESIDENT_HEADER.size] = pack(
            RESIDENT_HEADER, value_length=len(value), value_offset=value_offset, indexed=indexed)
        raw[ATTR_HEADER.size + 8:ATTR_HEADER.size + 8 + len(raw_name)] = raw_name
        raw[value_offset:value_offset + len(value)] = value
        return bytes(raw)

    def _nonresident_attribute(self, node: NtfsNode, attr_id: int, data_size: int,
                               runs: List[Tuple[int, Optional[int]]], initialized: int) -> bytes:
        mapping = encode_run_list(runs)
        header_end = ATTR_HEADER.size + NONRESIDENT_HEADER.size
        length = align(header_end + len(mapping), 8)
        clusters = sum(count for count, _ in runs)
        flags = ATTR_FLAG_SPARSE if any(lcn is None for _, lcn in runs) else 0
        raw = bytearray(length)
        raw[:ATTR_HEADER.size] = pack(ATTR_HEADER, type=ATTR_DATA, length=length, non_resident=1,
                                      name_offset=header_end, flags=flags, attr_id=attr_id)
        raw[ATTR_HEADER.size:header_end] = pack(
            NONRESIDENT_HEADER, last_vcn=max(0, clusters - 1), mapping_pairs_offset=header_end,
            allocated_size=clusters * self.cluster_size, data_size=data_size, initialized_size=initialized)
        raw[header_end:header_end + len(mapping)] = mapping
        return bytes(raw)

    def _file_name(self, node: NtfsNode, name: str, namespace: int, size: int) -> bytes:
        parent_sequence = 1
        raw_name = name.encode('utf-16-le')
        return pack(
            FILE_NAME, parent_ref=node.parent | (parent_sequence << 48), ctime=node.mtime, mtime=node.mtime,
            mft_mtime=node.mtime, atime=node.mtime, allocated_size=align(size, self.cluster_size), real_size=size,
            flags=FILE_NAME_DIRECTORY if node.is_dir else 0, name_length=len(raw_name) // 2, namespace=namespace,
        ) + raw_name

    def _record_bytes(self, node: NtfsNode) -> bytes:
        sectors = self.record_size // FIXUP_STRIDE
        attrs_offset = align(USA_OFFSET + 2 * (sectors + 1), 8)
        attributes = []
        attr_id = 0

        def next_id() -> int:
            nonlocal attr_id
            attr_id += 1
            return attr_id - 1

        if node.record_no == MFT_RECORD_NO:
            size = self.record_count * self.record_size
        else:
            size = len(node.data) if node.data is not None else 0
        info = STANDARD_INFORMATION.pack(node.mtime, node.mtime, node.mtime, node.mtime, 0x20)
        attributes.append(self._resident_attribute(ATTR_STANDARD_INFORMATION, info, next_id()))
        if node.dos_name:
            attributes.append(self._resident_attribute(
                ATTR_FILE_NAME, self._file_name(node, node.dos_name, NAMESPACE_DOS, size), next_id(), indexed=1))
            namespace = NAMESPACE_WIN32
        else:
            namespace = NAMESPACE_WIN32_DOS
        attributes.append(self._resident_attribute(
            ATTR_FILE_NAME, self._file_name(node, node.name, namespace, size), next_id(), indexed=1))

        if node.record_no == MFT_RECORD_NO:
            attributes.append(self._nonresident_attribute(
                node, next_id(), size, clusters_to_runs(self.mft_clusters), size))
        elif node.is_dir:
            attributes.append(self._resident_attribute(ATTR_INDEX_ROOT, bytes(48), next_id(), name='$I30'))
        elif node.resident:
            attributes.append(self._resident_attribute(ATTR_DATA, bytes(node.data), next_id()))
        else:
            initialized = size if node.initialized_size is None else node.initialized_size
            attributes.append(self._nonresident_attribute(
                node, next_id(), size, clusters_to_runs(node.clusters), initialized))
        for stream, value in sorted(node.streams.items()):
            attributes.append(self._resident_attribute(ATTR_DATA, value, next_id(), name=stream))

        body = b''.join(attributes) + struct.pack('<II', 0xFFFFFFFF, 0)
        bytes_in_use = attrs_offset + len(body)
        if bytes_in_use > self.record_size:
            raise ValueError(f"Record {node.record_no} needs {bytes_in_use} bytes of {self.record_size}")
        flags = (RECORD_IN_USE if node.in_use else 0) | (RECORD_IS_DIRECTORY if node.is_dir else 0)
        raw = bytearray(self.record_size)
        raw[:FILE_RECORD.size] = pack(
            FILE_RECORD, magic=b'FILE', usa_offset=USA_OFFSET, usa_count=sectors + 1, sequence=1,
            link_count=1, attrs_offset=attrs_offset, flags=flags, bytes_in_use=bytes_in_use,
            bytes_allocated=self.record_size, next_attr_id=attr_id,
        )
        struct.pack_into('<I', raw, 44, node.record_no)
        raw[attrs_offset:bytes_in_use] = body
        raw[USA_OFFSET:USA_OFFSET + 2] = FIXUP_CHECK
        for sector in range(sectors):
            end = (sector + 1) * FIXUP_STRIDE
            entry = USA_OFFSET + 2 + 2 * sector
            raw[entry:entry + 2] = raw[end - 2:end]
            raw[end - 2:end] = FIXUP_CHECK
        return bytes(raw)

    def _boot_sector(self) -> bytes:
        spc = self.cluster_size // SECTOR
        if self.record_size >= self.cluster_size:
            per_record = self.record_size // self.cluster_size
        else:
            per_record = -(self.record_size.bit_length() - 1)
        raw = bytearray(pack(
            BOOT_SECTOR, jump=b'\xebR\x90', oem_id=b'NTFS    ', bytes_per_sector=SECTOR,
            sectors_per_cluster=spc, media=0xF8, sectors_per_track=63, heads=255,
            total_sectors=self.total_clusters * spc, mft_lcn=self.mft_clusters[0],
            mftmirr_lcn=self.mirror_clusters[0], clusters_per_mft_record=per_record,
            clusters_per_index_record=1, serial=0x5EED5EED,
        )).ljust(SECTOR, b'\0')
        raw[510:512] = b'\x55\xaa'
        return bytes(raw)

    def _write_clusters(self, image: bytearray, clusters: Sequence[Optional[int]], data: bytes) -> None:
        cs = self.cluster_size
        for index, lcn in enumerate(clusters):
            if lcn is None:
                continue
            chunk = data[index * cs:(index + 1) * cs]
            image[lcn * cs:lcn * cs + len(chunk)] = chunk

    def render(self) -> bytearray:
        """The volume as it stands now."""
        image = bytearray(self.total_clusters * self.cluster_size)
        image[:SECTOR] = self._boot_sector()
        mft = bytearray(self.record_count * self.record_size)
        for node in self.nodes.values():
            start = node.record_no * self.record_size
            mft[start:start + self.record_size] = self._record_bytes(node)
            if node.record_no != MFT_RECORD_NO and not node.resident and not node.is_dir:
                self._write_clusters(image, node.clusters, bytes(node.data))
        self._write_clusters(image, self.mft_clusters, bytes(mft))
        self._write_clusters(image, self.mirror_clusters, bytes(mft[:4 * self.record_size]))
        return image


def populate_ntfs(builder: NtfsImageBuilder, count: int, rng: np.random.Generator,
                  max_size: int = 24 * 1024) -> List[str]:
    """Fill a fixture with count random files, a third of them resident."""
    paths = []
    builder.makedirs('\\Windows\\System32')
    for i in range(count):
        size = int(rng.integers(1, 400)) if i % 3 == 0 else int(rng.integers(600, max_size))
        path = f'\\Windows\\System32\\file{i:03d}.dll'
        builder.add_file(path, rng.bytes(size))
        paths.append(path)
    return paths


# QCOW2

def write_qcow2(path: Union[str, Path], virtual_size: int, clusters: Dict[int, bytes],
                cluster_bits: int = 16, version: int = 3, backing_file: Optional[str] = None,
                backing_format: Optional[str] = None, zero_clusters: Iterable[int] = (),
                compressed_clusters: Iterable[int] = (), **header) -> Path:
    """
    Write a QCOW2 image holding the given guest clusters.

    Args:
        path: Output file
        virtual_size: Guest-visible size
        clusters: Guest cluster index -> cluster content
        cluster_bits: log2 of the cluster size
        version: 2 or 3
        backing_file: Backing file name stored in the header
        backing_format: Backing format header extension ('raw', 'qcow2')
        zero_clusters: Guest clusters marked with the zero flag (version 3)
        compressed_clusters: Guest clusters marked compressed
        header: Raw header field overrides (crypt_method, incompatible_features ...)
    """
    cs = 1 << cluster_bits
    l2_entries = cs // 8
    l1_size = max(1, -(-virtual_size // (cs * l2_entries)))
    header_length = QCOW2_V3_HEADER_LENGTH if version == 3 else QCOW2_V2_HEADER_LENGTH

    extensions = b''
    if backing_format:
        name = backing_format.encode('ascii')
        extensions += pack(QCOW2_EXTENSION, type=EXT_BACKING_FORMAT, length=len(name)) + name.ljust(align(len(name), 8), b'\0')
    extensions += bytes(QCOW2_EXTENSION.size)
    backing_name = backing_file.encode('utf-8') if backing_file else b''
    name_offset = header_length + len(extensions)
    if name_offset + len(backing_name) > cs:
        raise ValueError("Header does not fit in the first cluster")

    next_cluster = 1
    l1_offset = next_cluster * cs
    next_cluster += -(-l1_size * 8 // cs)
    refcount_offset = next_cluster * cs
    next_cluster += 1

    l1 = np.zeros(l1_size, dtype='>u8')
    l2_tables: Dict[int, Tuple[int, np.ndarray]] = {}
    data_clusters: Dict[int, bytes] = {}
    zero_clusters, compressed_clusters = set(zero_clusters), set(compressed_clusters)
    if zero_clusters and version < 3:
        raise ValueError("Zero clusters need version 3")
    for guest in sorted(set(clusters) | zero_clusters | compressed_clusters):
        l1_index, l2_index = divmod(guest, l2_entries)
        if l1_index not in l2_tables:
            l2_tables[l1_index] = (next_cluster, np.zeros(l2_entries, dtype='>u8'))
            l1[l1_index] = (next_cluster * cs) | QCOW_OFLAG_COPIED
            next_cluster += 1
        table = l2_tables[l1_index][1]
        if guest in zero_clusters:
            table[l2_index] = QCOW_OFLAG_ZERO
            continue
        content = clusters.get(guest, bytes(cs))
        if len(content) > cs:
            raise ValueError(f"Cluster {guest} holds {len(content)} bytes")
        flag = QCOW_OFLAG_COMPRESSED if guest in compressed_clusters else QCOW_OFLAG_COPIED
        table[l2_index] = (next_cluster * cs) | flag
        data_clusters[next_cluster] = content
        next_cluster += 1

    fields = dict(
        magic=QCOW2_MAGIC, version=version, backing_file_offset=name_offset if backing_name else 0,
        backing_file_size=len(backing_name), cluster_bits=cluster_bits, size=virtual_size,
        l1_size=l1_size, l1_table_offset=l1_offset, refcount_table_offset=refcount_offset,
        refcount_table_clusters=1,
    )
    extra = dict(refcount_order=4, header_length=header_length)
    for key, value in header.items():
        (extra if key in QCOW2_HEADER_V3.keys else fields)[key] = value

    out = bytearray(next_cluster * cs)
    head = pack(QCOW2_HEADER_V2, **fields)
    if version == 3:
        head += pack(QCOW2_HEADER_V3, **extra)
    out[:len(head)] = head
    out[header_length:header_length + len(extensions)] = extensions
    out[name_offset:name_offset + len(backing_name)] = backing_name
    out[l1_offset:l1_offset + l1.nbytes] = l1.tobytes()
    for host, table in l2_tables.values():
        out[host * cs:(host + 1) * cs] = table.tobytes()
    for host, content in data_clusters.items():
        out[host * cs:host * cs + len(content)] = content
    return save_image(path, out)


def write_standalone_qcow2(path: Union[str, Path], content: bytes, cluster_bits: int = 16,
                           version: int = 3) -> Path:
    """QCOW2 image without backing holding content; all-zero clusters stay unallocated."""
    cs = 1 << cluster_bits
    clusters = {}
    for index in range(-(-len(content) // cs)):
        chunk = content[index * cs:(index + 1) * cs]
        if any(chunk):
            clusters[index] = bytes(chunk)
    return write_qcow2(path, len(content), clusters, cluster_bits=cluster_bits, version=version)


class Qcow2OverlayBuilder:
    """
    Copy-on-write overlay over an in-memory base.

    A guest write allocates each touched cluster in the overlay, copying
    the rest of the cluster from the base first, exactly as the hypervisor
    does.
    """

    def __init__(self, base: Union[bytes, bytearray], cluster_bits: int = 16):
        self.base = bytes(base)
        self.virtual_size = len(self.base)
        self.cluster_bits = cluster_bits
        self.cluster_size = 1 << cluster_bits
        self.clusters: Dict[int, bytearray] = {}

    def write(self, guest_offset: int, data: bytes) -> None:
        cs = self.cluster_size
        if guest_offset + len(data) > self.virtual_size:
            raise ValueError("Write past the virtual size")
        position = guest_offset
        end = guest_offset + len(data)
        while position < end:
            index, intra = divmod(position, cs)
            chunk = min(end - position, cs - intra)
            cluster = self.clusters.get(index)
            if cluster is None:
                cluster = bytearray(self.base[index * cs:(index + 1) * cs].ljust(cs, b'\0'))
                self.clusters[index] = cluster
            cluster[intra:intra + chunk] = data[position - guest_offset:position - guest_offset + chunk]
            position += chunk

    def apply(self, writes: Iterable[Tuple[int, bytes]]) -> None:
        for offset, data in writes:
            self.write(offset, data)

    def content(self) -> bytes:
        """The flattened guest view."""
        flat = bytearray(self.base)
        cs = self.cluster_size
        for index, cluster in self.clusters.items():
            stop = min(self.virtual_size, (index + 1) * cs)
            flat[index * cs:stop] = cluster[:stop - index * cs]
        return bytes(flat)

    def save(self, path: Union[str, Path], backing_file: str, backing_format: Optional[str] = None,
             version: int = 3) -> Path:
        return write_qcow2(path, self.virtual_size, {i: bytes(c) for i, c in self.clusters.items()},
                           cluster_bits=self.cluster_bits, version=version,
                           backing_file=backing_file, backing_format=backing_format)


# Partition tables

def wrap_mbr(fs_image: bytes, start_lba: int = 2048, partition_type: int = 0x83) -> bytearray:
    """Disk with one primary MBR partition holding fs_image."""
    sectors = -(-len(fs_image) // SECTOR)
    disk = bytearray((start_lba + sectors) * SECTOR)
    disk[start_lba * SECTOR:start_lba * SECTOR + len(fs_image)] = fs_image
    disk[446:446 + MBR_ENTRY.size] = pack(MBR_ENTRY, status=0x80, chs_first=b'\xfe\xff\xff', type=partition_type,
                                          chs_last=b'\xfe\xff\xff', lba_start=start_lba, sectors=sectors)
    disk[510:512] = b'\x55\xaa'
    return disk


def wrap_gpt(fs_image: bytes, start_lba: int = 2048, name: str = 'root') -> bytearray:
    """Disk with a protective MBR and one GPT partition holding fs_image."""
    sectors = -(-len(fs_image) // SECTOR)
    last_lba = start_lba + sectors - 1
    total = last_lba + 1 + 33
    disk = bytearray(total * SECTOR)
    disk[start_lba * SECTOR:start_lba * SECTOR + len(fs_image)] = fs_image
    disk[446:446 + MBR_ENTRY.size] = pack(MBR_ENTRY, chs_first=b'\x00\x02\x00', type=0xEE, chs_last=b'\xff\xff\xff',
                                          lba_start=1, sectors=min(total - 1, 0xFFFFFFFF))
    disk[510:512] = b'\x55\xaa'

    entries = bytearray(128 * 128)
    entries[:GPT_ENTRY.size] = pack(
        GPT_ENTRY, type_guid=LINUX_FS_GUID.bytes_le, unique_guid=uuid.UUID(int=7).bytes_le,
        first_lba=start_lba, last_lba=last_lba, name=name.encode('utf-16-le').ljust(72, b'\0'))
    fields = dict(signature=b'EFI PART', revision=0x00010000, header_size=GPT_HEADER.size, current_lba=1,
                  backup_lba=total - 1, first_usable_lba=34, last_usable_lba=total - 34,
                  disk_guid=uuid.UUID(int=42).bytes_le, entries_lba=2, num_entries=128, entry_size=128,
                  entries_crc=zlib.crc32(entries))
    header = pack(GPT_HEADER, **fields)
    header = pack(GPT_HEADER, header_crc=zlib.crc32(header), **fields)
    disk[SECTOR:SECTOR + len(header)] = header
    disk[2 * SECTOR:2 * SECTOR + len(entries)] = entries
    return disk


# Writes

def diff_writes(old: Union[bytes, bytearray], new: Union[bytes, bytearray],
                granularity: int = SECTOR) -> List[Tuple[int, bytes]]:
    """
    The writes turning old into new, as a disk driver would issue them.

    Changed bytes are widened to whole granularity-sized sectors and
    neighbouring sectors are merged into one write.
    """
    if len(old) != len(new):
        raise ValueError("Images differ in size")
    size = len(new)
    padded = align(size, granularity)
    a = np.zeros(padded, dtype=np.uint8)
    b = np.zeros(padded, dtype=np.uint8)
    a[:size] = np.frombuffer(bytes(old), dtype=np.uint8)
    b[:size] = np.frombuffer(bytes(new), dtype=np.uint8)
    changed = (a != b).reshape(-1, granularity).any(axis=1)
    edges = np.flatnonzero(np.diff(np.concatenate(([False], changed, [False])).astype(np.int8)))
    writes = []
    for first, last in zip(edges[0::2], edges[1::2]):
        start = int(first) * granularity
        stop = min(int(last) * granularity, size)
        writes.append((start, bytes(new[start:stop])))
    return writes


def shift_writes(writes: Iterable[Tuple[int, bytes]], offset: int) -> List[Tuple[int, bytes]]:
    return [(position + offset, data) for position, data in writes]


def write_records(writes: Iterable[Tuple[int, bytes]]) -> np.ndarray:
    """(offset, length) record array for a list of writes."""
    rows = [(offset, len(data)) for offset, data in writes]
    return np.array(rows, dtype='<u8').reshape(-1, 2)


def apply_writes(image: bytearray, writes: Iterable[Tuple[int, bytes]]) -> bytearray:
    for offset, data in writes:
        image[offset:offset + len(data)] = data
    return image


def changed_blocks(old: bytes, new: bytes, header_offset: int, block_size: int) -> Set[int]:
    """Brute-force set of block addresses whose bytes differ."""
    a = np.frombuffer(bytes(old[header_offset:]), dtype=np.uint8)
    b = np.frombuffer(bytes(new[header_offset:]), dtype=np.uint8)
    whole = len(a) // block_size * block_size
    differs = (a[:whole] != b[:whole]).reshape(-1, block_size).any(axis=1)
    return set(np.flatnonzero(differs).tolist())
