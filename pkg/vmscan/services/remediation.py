"""
Remediation service for vmscan.

Handles abnormal files found by a scan:
- destroy_file_content zeroes a file's content blocks on a RAW image and
  leaves its metadata alone, so the file stays resolvable
- build_restore_bundle collects pristine copies of protected files from the
  base image or the baseline backups into a directory with a manifest
"""

import hashlib
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Union

from ..errors import (
    BaselineCorruptError,
    FilesystemError,
    RemediationError,
    UnsupportedFeatureError,
)
from .baseline_db import BaselineDb
from .filesystem import GuestFilesystem
from .image import ImageHandle
from .scanner import ExportPaths, write_manifest

logger = logging.getLogger(__name__)

RESTORE_MANIFEST = 'restore-manifest.tsv'
RESTORE_COLUMNS = ['guest_path', 'source', 'sha256', 'restore_relpath']
SOURCE_BASE = 'base'
SOURCE_BACKUP = 'backup'
SOURCE_UNRESTORABLE = 'unrestorable'

# zero-fill writes are issued in pieces of at most this many bytes
ZERO_CHUNK = 1 << 20


def _allocation_unit(fs: GuestFilesystem) -> int:
    return fs.cluster_size if fs.fs_type == 'ntfs' else fs.block_size


def _zero_range(image: ImageHandle, offset: int, length: int) -> None:
    position = offset
    end = offset + length
    while position < end:
        chunk = min(ZERO_CHUNK, end - position)
        image.write_guest(position, bytes(chunk))
        position += chunk


def destroy_file_content(image: ImageHandle, fs: GuestFilesystem, path: str) -> int:
    """
    Overwrite a file's content with zeros in place.

    Metadata (inode or MFT record header, names, sizes) is untouched. Data
    stored inside the metadata (ext4 inline data, NTFS resident values) is
    zeroed where it sits.

    Args:
        image: Image opened writable; must be the image fs was mounted from
        fs: Mounted guest filesystem
        path: File to destroy

    Returns:
        Number of filesystem blocks (ext4) or clusters (NTFS) zeroed; 1 for
        data stored inside the metadata, 0 for an empty file

    Raises:
        UnsupportedFeatureError: If the image is QCOW2
        RemediationError: If the image is read-only or path is not a regular file
        PathNotFoundError: If path does not resolve
    """
    if image.format != 'raw':
        raise UnsupportedFeatureError(
            f"Destroying file content in {image.format} images is not supported; flatten to RAW first"
        )
    if not image.writable:
        raise RemediationError(f"{image.path} must be opened writable to destroy file content")

    ref = fs.resolve(path)
    if not ref.is_regular:
        raise RemediationError(f"{path} is not a regular file")
    block_map = fs.file_block_map(path, ref)

    if block_map.resident:
        if block_map.size == 0:
            return 0
        if fs.fs_type == 'ntfs':
            for offset, data in fs.resident_wipe(ref):
                image.write_guest(offset, data)
        else:
            for offset, length in fs.content_extents(ref):
                _zero_range(image, offset, length)
        logger.warning("Destroyed content of %s (stored inside its metadata)", path)
        return 1

    extents = fs.content_extents(ref)
    zeroed = 0
    for offset, length in extents:
        _zero_range(image, offset, length)
        zeroed += length
    count = zeroed // _allocation_unit(fs)
    logger.warning("Destroyed content of %s: %d allocation units zeroed", path, count)
    return count


def _base_copy(base_fs: GuestFilesystem, path: str, sha256: str) -> Optional[bytes]:
    """Content of path in the base filesystem when it matches the baseline hash."""
    try:
        ref = base_fs.resolve(path)
        if not ref.is_regular:
            return None
        content = base_fs.read_file(ref)
    except (FilesystemError, UnsupportedFeatureError) as e:
        logger.info("%s not usable from the base image: %s", path, e)
        return None
    if hashlib.sha256(content).hexdigest() != sha256:
        return None
    return content


def build_restore_bundle(db: BaselineDb, base_fs: Optional[GuestFilesystem], paths: Iterable[str],
                         out_dir: Union[str, Path]) -> Path:
    """
    Assemble pristine copies of protected files.

    Each path is taken from the base image when its content there matches
    the baseline hash, otherwise from the baseline backup. Paths with
    neither source (or without a baseline entry) are listed as unrestorable.

    Args:
        db: Loaded baseline
        base_fs: Filesystem of the base image, or None
        paths: Guest paths to restore
        out_dir: Bundle directory; copies go under files/

    Returns:
        Path of restore-manifest.tsv

    Raises:
        BaselineCorruptError: If a backup copy does not match its baseline hash
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = ExportPaths()
    rows: List[dict] = []
    for path in sorted(set(paths)):
        entry = db.lookup(path)
        if entry is None:
            logger.warning("%s has no baseline entry; cannot restore", path)
            rows.append({'guest_path': path, 'source': SOURCE_UNRESTORABLE, 'sha256': ''})
            continue

        content = _base_copy(base_fs, entry.guest_path, entry.sha256) if base_fs is not None else None
        source = SOURCE_BASE
        if content is None:
            content = db.read_backup(entry)
            source = SOURCE_BACKUP
        if content is None:
            logger.warning("%s is neither in the base image nor backed up", entry.guest_path)
            rows.append({'guest_path': entry.guest_path, 'source': SOURCE_UNRESTORABLE, 'sha256': entry.sha256})
            continue

        digest = hashlib.sha256(content).hexdigest()
        if digest != entry.sha256:
            raise BaselineCorruptError(f"Restored copy of {entry.guest_path} does not match its baseline hash")
        relpath = names.relpath(entry.guest_path)
        target = out_dir / relpath
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(content)
        rows.append({'guest_path': entry.guest_path, 'source': source, 'sha256': digest,
                     'restore_relpath': relpath})

    manifest = write_manifest(rows, out_dir / RESTORE_MANIFEST, RESTORE_COLUMNS)
    restored = sum(1 for row in rows if row['source'] != SOURCE_UNRESTORABLE)
    logger.info("Restore bundle in %s: %d of %d files restored", out_dir, restored, len(rows))
    return manifest
