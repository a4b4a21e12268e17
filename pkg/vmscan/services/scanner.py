"""
File scanning service for vmscan.

For each candidate file a dirty predicate decides, without reading file
content, whether the file may have changed. Only files with dirty evidence
are hashed and compared with the baseline; all others are reported Secure.

Two predicates are provided:
- SingleImagePredicate: any of the file's blocks set in the dirty block map
- OverlayPredicate: the file's inode / MFT record cluster is allocated in the
  QCOW2 overlay, and then any of its content clusters is too
"""

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple, Union

import pandas as pd

from ..errors import (
    FilesystemError,
    GeometryError,
    PathNotFoundError,
    UnsupportedFeatureError,
    WrongModeError,
)
from ..models import FileBlockMap, ScanResult, Verdict
from .dirty_map import DirtyBlockMap
from .filesystem import GuestFilesystem, path_key
from .image import ImageHandle

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.tsv'
MANIFEST_COLUMNS = ['guest_path', 'verdict', 'sha256', 'export_relpath', 'error']
EXPORT_SUBDIR = 'files'
RESULTS_VERSION = 1

_UNSAFE = re.compile(r'[^A-Za-z0-9._-]')


class SingleImagePredicate:
    """Dirty evidence = file blocks set in a dirty block map."""

    mode = 'single'

    def __init__(self, dirty_map: DirtyBlockMap):
        self.dirty_map = dirty_map

    def check(self, fs: GuestFilesystem, block_map: FileBlockMap) -> Tuple[bool, Tuple[int, ...]]:
        """
        Returns:
            (dirty, dirty block addresses of the file)

        Raises:
            GeometryError: If the file's geometry differs from the map's
        """
        geometry = self.dirty_map.geometry
        if (block_map.geometry.block_size, block_map.geometry.header_offset) != \
                (geometry.block_size, geometry.header_offset):
            raise GeometryError(
                f"Filesystem geometry {block_map.geometry} does not match dirty map geometry {geometry}"
            )
        if self.dirty_map.first_dirty(block_map.blocks) is None:
            return False, ()
        return True, tuple(self.dirty_map.dirty_among(block_map.blocks))


class OverlayPredicate:
    """
    Dirty evidence = content clusters allocated in a QCOW2 overlay.

    A modified file always has a modified inode (or MFT record), so a file
    whose metadata cluster is not in the overlay is clean. A rewritten
    metadata cluster alone (an access time update) is not enough: at least
    one content cluster has to be in the overlay too.
    """

    mode = 'overlay'

    def __init__(self, overlay: ImageHandle):
        if not overlay.has_backing:
            raise WrongModeError(f"{overlay.path} has no backing image; overlay scanning needs one")
        self.overlay = overlay

    def check(self, fs: GuestFilesystem, block_map: FileBlockMap) -> Tuple[bool, Tuple[int, ...]]:
        meta_offset, meta_length = block_map.metadata_range()
        if not self.overlay.allocated_in_overlay(meta_offset, meta_length):
            return False, ()
        if block_map.resident:
            clusters = self.overlay.overlay_clusters(meta_offset, meta_length)
            return bool(clusters), tuple(clusters)
        evidence: List[int] = []
        for offset, length in block_map.byte_ranges():
            evidence.extend(self.overlay.overlay_clusters(offset, length))
        return bool(evidence), tuple(evidence)


def dirty_predicate_single(dirty_map: DirtyBlockMap) -> Callable[[FileBlockMap], bool]:
    """Predicate over file block maps; short-circuits at the first dirty block."""
    return lambda block_map: dirty_map.first_dirty(block_map.blocks) is not None


def dirty_predicate_overlay(overlay: ImageHandle, fs: GuestFilesystem) -> Callable[[str], bool]:
    """
    Predicate over guest paths using overlay allocation.

    Raises:
        WrongModeError: If the overlay has no backing image
    """
    predicate = OverlayPredicate(overlay)

    def check(path: str) -> bool:
        return predicate.check(fs, fs.file_block_map(path))[0]
    return check


@dataclass
class ScanRequest:
    """
    Files to scan and the predicate filtering them.

    Attributes:
        file_array: Guest paths to check
        predicate: SingleImagePredicate or OverlayPredicate
        all_files: True when file_array came from a full filesystem listing
    """
    file_array: List[str]
    predicate: Union[SingleImagePredicate, OverlayPredicate]
    all_files: bool = False

    def __post_init__(self):
        if not self.all_files and not self.file_array:
            raise ValueError("Scan request needs at least one path")

    @classmethod
    def for_all(cls, fs: GuestFilesystem, predicate) -> 'ScanRequest':
        paths = [path for path, ref in fs.list_all_files() if ref.is_regular]
        return cls(file_array=paths, predicate=predicate, all_files=True)


class Scanner:
    """
    Runs the file scanning loop.

    This class handles:
    - Resolving each path (unresolvable protected files are Deleted)
    - Consulting the dirty predicate before touching file content
    - Hashing dirty files and comparing against the baseline
    """

    def __init__(self, fs: GuestFilesystem, baseline=None, workers: int = 1):
        """
        Initialize the scanner.

        Args:
            fs: Mounted guest filesystem
            baseline: BaselineDb (or anything with lookup(path) and paths()), or None
            workers: Files checked in parallel
        """
        self.fs = fs
        self.baseline = baseline
        self.workers = max(1, workers)

    def scan_file(self, path: str, predicate) -> ScanResult:
        """Produce the verdict for one path."""
        path = self.fs.normalize_path(path)
        entry = self.baseline.lookup(path) if self.baseline is not None else None
        try:
            ref = self.fs.resolve(path)
        except PathNotFoundError:
            return ScanResult(path=path, verdict=Verdict.DELETED)
        except (FilesystemError, UnsupportedFeatureError) as e:
            logger.warning("Cannot resolve %s: %s", path, e)
            return ScanResult(path=path, verdict=Verdict.SCAN_ERROR, reason=str(e))

        try:
            if not ref.is_regular:
                raise FilesystemError(f"{path} is not a regular file")
            block_map = self.fs.file_block_map(path, ref)
            if entry is not None and entry.size != ref.size:
                # size changes touch only the inode
                dirty, evidence = True, tuple(block_map.mapped_blocks())
            else:
                dirty, evidence = predicate.check(self.fs, block_map)
            if not dirty:
                return ScanResult(path=path, verdict=Verdict.SECURE)
            content = self.fs.read_file(ref)
        except (FilesystemError, UnsupportedFeatureError) as e:
            logger.warning("Cannot scan %s: %s", path, e)
            return ScanResult(path=path, verdict=Verdict.SCAN_ERROR, reason=str(e))

        digest = hashlib.sha256(content).hexdigest()
        if entry is None:
            verdict = Verdict.NEW
        elif entry.sha256 != digest:
            verdict = Verdict.MODIFIED
        else:
            verdict = Verdict.SECURE
        return ScanResult(path=path, verdict=verdict, evidence=evidence, sha256=digest,
                          bytes_read=len(content))

    def scan(self, request: ScanRequest) -> List[ScanResult]:
        """
        Scan every file of the request.

        Returns:
            Results sorted by guest path, independent of file_array order
        """
        unique: Dict[str, str] = {}
        for path in request.file_array:
            unique.setdefault(path_key(self.fs, path), path)

        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix='scan') as pool:
                results = list(pool.map(lambda p: self.scan_file(p, request.predicate), unique.values()))
        else:
            results = [self.scan_file(p, request.predicate) for p in unique.values()]

        if request.all_files and self.baseline is not None:
            for baseline_path in self.baseline.paths():
                key = path_key(self.fs, baseline_path)
                if key not in unique:
                    unique[key] = baseline_path
                    results.append(ScanResult(path=self.fs.normalize_path(baseline_path), verdict=Verdict.DELETED))

        results.sort(key=lambda r: path_key(self.fs, r.path))
        content_reads = sum(1 for r in results if r.bytes_read)
        logger.info("Scanned %d files, read content of %d", len(results), content_reads)
        return results


def scan(request: ScanRequest, fs: GuestFilesystem, baseline=None, workers: int = 1) -> List[ScanResult]:
    """Run Scanner(fs, baseline, workers).scan(request)."""
    return Scanner(fs, baseline, workers).scan(request)


def sanitize_guest_path(path: str, prefix: str = EXPORT_SUBDIR) -> str:
    """Relative path under prefix mirroring a guest path, unsafe characters replaced."""
    parts = [p for p in re.split(r'[\\/]+', path) if p]
    safe = []
    for part in parts:
        part = _UNSAFE.sub('_', part)
        if part in ('.', '..'):
            part = '_' * len(part)
        safe.append(part)
    return '/'.join([prefix] + safe)


class ExportPaths:
    """
    Relative paths for one export, baseline or restore bundle.

    Distinct guest paths can sanitize to the same name ('/etc/a b' and
    '/etc/a_b'), and on a case-insensitive host so can names differing only
    in case. The second such path gets a '~' and eight hex digits of its
    SHA-256 appended.
    """

    def __init__(self, prefix: str = EXPORT_SUBDIR):
        self.prefix = prefix
        self._owners: Dict[str, str] = {}

    def relpath(self, guest_path: str) -> str:
        relpath = sanitize_guest_path(guest_path, self.prefix)
        owner = self._owners.get(relpath.lower())
        if owner is not None and owner != guest_path:
            suffix = hashlib.sha256(guest_path.encode('utf-8', 'surrogateescape')).hexdigest()[:8]
            renamed = f'{relpath}~{suffix}'
            logger.warning("%s and %s both map to %s; writing %s", owner, guest_path, relpath, renamed)
            relpath = renamed
        self._owners.setdefault(relpath.lower(), guest_path)
        return relpath


def write_manifest(rows: List[dict], path: Path, columns: List[str]) -> Path:
    """Write a tab-separated manifest with a '#' header line."""
    frame = pd.DataFrame(rows, columns=columns).fillna('')
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write('# ' + '\t'.join(columns) + '\n')
        if not frame.empty:
            frame.to_csv(f, sep='\t', header=False, index=False, lineterminator='\n')
    return path


def read_manifest(path: Union[str, Path]) -> pd.DataFrame:
    """Read a manifest written by write_manifest."""
    path = Path(path)
    with open(path, encoding='utf-8') as f:
        header = f.readline()
    columns = header.lstrip('#').strip().split('\t')
    frame = pd.read_csv(path, sep='\t', skiprows=1, header=None, names=columns,
                        dtype=str, keep_default_na=False)
    return frame


def export_dirty(results: Iterable[ScanResult], out_dir: Union[str, Path], fs: GuestFilesystem) -> Path:
    """
    Copy out the content of every file that is neither Secure nor Deleted.

    Extraction failures are recorded in the manifest's error column and do
    not abort the export.

    Returns:
        Path of manifest.tsv in out_dir
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = ExportPaths()
    rows = []
    for result in sorted(results, key=lambda r: path_key(fs, r.path)):
        if result.verdict in (Verdict.SECURE, Verdict.DELETED):
            continue
        relpath = names.relpath(result.path)
        row = {'guest_path': result.path, 'verdict': result.verdict.value,
               'sha256': result.sha256 or '', 'export_relpath': relpath, 'error': ''}
        try:
            content = fs.read_file(fs.resolve(result.path))
            target = out_dir / relpath
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(content)
            row['sha256'] = hashlib.sha256(content).hexdigest()
        except (FilesystemError, UnsupportedFeatureError, OSError) as e:
            logger.warning("Export of %s failed: %s", result.path, e)
            row['export_relpath'] = ''
            row['error'] = str(e)
        rows.append(row)
    manifest = write_manifest(rows, out_dir / MANIFEST_NAME, MANIFEST_COLUMNS)
    logger.info("Exported %d files to %s", len(rows), out_dir)
    return manifest


@dataclass
class ScanRun:
    """A saved scan: where it ran and what it found."""
    image: str
    mode: str
    fs_offset: int
    block_size: int
    results: List[ScanResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            'version': RESULTS_VERSION,
            'image': self.image,
            'mode': self.mode,
            'fs_offset': self.fs_offset,
            'block_size': self.block_size,
            'results': [r.to_dict() for r in self.results],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ScanRun':
        return cls(
            image=data['image'],
            mode=data['mode'],
            fs_offset=int(data['fs_offset']),
            block_size=int(data['block_size']),
            results=[ScanResult.from_dict(r) for r in data.get('results', [])],
        )


def save_results(run: ScanRun, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True), encoding='utf-8')
    return path


def load_results(path: Union[str, Path]) -> ScanRun:
    return ScanRun.from_dict(json.loads(Path(path).read_text(encoding='utf-8')))
