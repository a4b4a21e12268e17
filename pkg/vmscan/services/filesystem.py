"""
Guest filesystem detection and the interface shared by the EXT4 and NTFS readers.
"""

import logging
import posixpath
from typing import List, Optional, Protocol, Tuple

from ..errors import BadMagicError
from ..models import FileBlockMap, ImageGeometry, InodeRef
from .image import ImageHandle

logger = logging.getLogger(__name__)

EXT_MAGIC_OFFSET = 1024 + 56
EXT_MAGIC = b'\x53\xef'
NTFS_OEM_OFFSET = 3
NTFS_OEM = b'NTFS    '
ASCII_FOLD = str.maketrans('ABCDEFGHIJKLMNOPQRSTUVWXYZ', 'abcdefghijklmnopqrstuvwxyz')


class GuestFilesystem(Protocol):
    """
    Read-only view of a guest filesystem used by the scanner, baseline and remediation.

    Attributes:
        image: Image the filesystem lives in
        partition_offset: Byte offset of the filesystem in the image
        geometry: Dirty-map geometry block addresses are expressed in
        fs_type: 'ext4' or 'ntfs'
        case_insensitive: True when path lookups fold case
    """
    image: ImageHandle
    partition_offset: int
    geometry: ImageGeometry
    fs_type: str
    case_insensitive: bool

    def normalize_path(self, path: str) -> str: ...

    def resolve(self, path: str) -> InodeRef: ...

    def file_block_map(self, path: str, ref: Optional[InodeRef] = None) -> FileBlockMap: ...

    def content_extents(self, ref: InodeRef) -> List[Tuple[int, int]]: ...

    def logical_extents(self, ref: InodeRef) -> List[Tuple[int, Optional[int], int]]: ...

    def read_file(self, ref: InodeRef) -> bytes: ...

    def list_all_files(self) -> List[Tuple[str, InodeRef]]: ...


def detect_filesystem(image: ImageHandle, partition_offset: int) -> str:
    """
    Identify the filesystem at partition_offset.

    Returns:
        'ext4' or 'ntfs'

    Raises:
        BadMagicError: If neither superblock is recognised
    """
    if partition_offset + 2048 <= image.virtual_size:
        head = image.read_guest(partition_offset, 2048)
        if head[NTFS_OEM_OFFSET:NTFS_OEM_OFFSET + 8] == NTFS_OEM:
            return 'ntfs'
        if head[EXT_MAGIC_OFFSET:EXT_MAGIC_OFFSET + 2] == EXT_MAGIC:
            return 'ext4'
    raise BadMagicError(f"No EXT or NTFS filesystem at offset {partition_offset} of {image.path}")


def default_geometry(image: ImageHandle, partition_offset: int, block_size: int = 4096) -> ImageGeometry:
    """Geometry covering the image from partition_offset to its end."""
    return ImageGeometry.for_image(image.virtual_size, partition_offset, block_size)


def mount_filesystem(image: ImageHandle, partition_offset: int,
                     geometry: Optional[ImageGeometry] = None) -> GuestFilesystem:
    """
    Mount whichever supported filesystem sits at partition_offset.

    Args:
        image: Opened image
        partition_offset: Filesystem start in bytes
        geometry: Dirty-map geometry (default: 4096-byte blocks from partition_offset)
    """
    from .fs_ext4 import mount_ext4
    from .fs_ntfs import mount_ntfs

    fs_type = detect_filesystem(image, partition_offset)
    if geometry is None:
        geometry = default_geometry(image, partition_offset)
    logger.info("Mounting %s at offset %d of %s", fs_type, partition_offset, image.path)
    if fs_type == 'ntfs':
        return mount_ntfs(image, partition_offset, geometry)
    return mount_ext4(image, partition_offset, geometry)


def blocks_for_extents(geometry: ImageGeometry, extents: List[Tuple[Optional[int], int]]) -> List[Optional[int]]:
    """
    Convert content extents into dirty-map block addresses.

    Args:
        geometry: Target block geometry
        extents: (image_offset or None for a hole, length) pairs in file order

    Returns:
        Block addresses in file order with None for holes; an address shared
        by neighbouring extents is listed once
    """
    blocks: List[Optional[int]] = []
    bs = geometry.block_size
    for offset, length in extents:
        if length <= 0:
            continue
        if offset is None:
            blocks.extend([None] * (-(-length // bs)))
            continue
        for block in geometry.blocks_for_range(offset, length):
            if blocks and blocks[-1] == block:
                continue
            blocks.append(block)
    return blocks


def fold_name(name: str) -> str:
    """Case-fold ASCII letters only; other characters compare exactly."""
    return name.translate(ASCII_FOLD)


def path_key(fs: GuestFilesystem, path: str) -> str:
    """Comparison key of a guest path under the filesystem's case rule."""
    normalized = fs.normalize_path(path)
    return fold_name(normalized) if fs.case_insensitive else normalized


def normalize_guest_path(fs_type: str, path: str) -> str:
    """
    Canonical form of a guest path.

    EXT paths are absolute POSIX paths; NTFS paths use backslashes (forward
    slashes are accepted) with a leading backslash.
    """
    if fs_type == 'ntfs':
        parts = [p for p in path.replace('/', '\\').split('\\') if p and p != '.']
        return '\\' + '\\'.join(parts)
    if not path.startswith('/'):
        path = '/' + path
    normalized = posixpath.normpath(path)
    return '/' if normalized in ('/', '//') else normalized
