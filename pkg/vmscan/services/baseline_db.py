"""
Baseline database for vmscan.

Stores the trusted SHA-256 of every protected file, plus backup copies of
files that cannot be fetched from a base image later. The database is a
directory:

    baseline.tsv    header line, column header, rows sorted by path,
                    and a trailing body checksum line
    backups/...     backup copies mirroring guest paths
    missing.txt     protected paths that did not resolve at snapshot time
"""

import hashlib
import io
import logging
import re
import shutil
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import pandas as pd

from ..errors import (
    BaselineCorruptError,
    BaselineError,
    FilesystemError,
    PathNotFoundError,
    UnsupportedFeatureError,
)
from ..models import BaselineEntry
from .filesystem import GuestFilesystem, fold_name, normalize_guest_path
from .scanner import ExportPaths

logger = logging.getLogger(__name__)

DB_FILE = 'baseline.tsv'
BACKUP_DIR = 'backups'
MISSING_FILE = 'missing.txt'
FORMAT_TAG = 'vmscan-baseline v1'
CHECKSUM_PREFIX = '# body-sha256 '

_HEADER = re.compile(r'^# vmscan-baseline v1 fs=(?P<fs>\w+) case_insensitive=(?P<ci>[01])$')
_SHA256 = re.compile(r'^[0-9a-f]{64}$')


class BaselineDb:
    """
    In-memory baseline loaded from (or about to be written to) a db directory.

    Attributes:
        db_dir: Database directory
        fs_type: Filesystem the baseline was taken from ('ext4' or 'ntfs')
        case_insensitive: True when lookups fold case (NTFS)
    """

    REQUIRED_COLUMNS = ['guest_path', 'sha256', 'size', 'backup_relpath']

    def __init__(self, db_dir: Union[str, Path], fs_type: str = 'ext4', case_insensitive: bool = False,
                 entries: Iterable[BaselineEntry] = ()):
        self.db_dir = Path(db_dir)
        self.fs_type = fs_type
        self.case_insensitive = case_insensitive
        self._entries: Dict[str, BaselineEntry] = {}
        for entry in entries:
            self.add(entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, path: str) -> bool:
        return self.lookup(path) is not None

    def _key(self, path: str) -> str:
        normalized = normalize_guest_path(self.fs_type, path)
        return fold_name(normalized) if self.case_insensitive else normalized

    def add(self, entry: BaselineEntry) -> None:
        self._entries[self._key(entry.guest_path)] = entry

    def lookup(self, guest_path: str) -> Optional[BaselineEntry]:
        """Exact path lookup (ASCII case folded on NTFS baselines)."""
        return self._entries.get(self._key(guest_path))

    def entries(self) -> List[BaselineEntry]:
        return sorted(self._entries.values(), key=lambda e: e.guest_path)

    def paths(self) -> List[str]:
        return [entry.guest_path for entry in self.entries()]

    def backup_path(self, entry: BaselineEntry) -> Optional[Path]:
        if not entry.backup_relpath:
            return None
        return self.db_dir / entry.backup_relpath

    def read_backup(self, entry: BaselineEntry) -> Optional[bytes]:
        """
        Backup content of an entry, verified against its hash.

        Returns:
            Content, or None when the entry has no backup

        Raises:
            BaselineCorruptError: If the backup is missing or does not hash to the entry's sha256
        """
        path = self.backup_path(entry)
        if path is None:
            return None
        try:
            content = path.read_bytes()
        except OSError as e:
            raise BaselineCorruptError(f"Backup of {entry.guest_path} unreadable: {e}") from e
        if hashlib.sha256(content).hexdigest() != entry.sha256:
            raise BaselineCorruptError(f"Backup of {entry.guest_path} does not match its baseline hash")
        return content

    # Serialization

    def to_text(self) -> str:
        frame = pd.DataFrame(
            [[e.guest_path, e.sha256, e.size, e.backup_relpath or ''] for e in self.entries()],
            columns=self.REQUIRED_COLUMNS,
        )
        buffer = io.StringIO()
        buffer.write(f'# {FORMAT_TAG} fs={self.fs_type} case_insensitive={int(self.case_insensitive)}\n')
        frame.to_csv(buffer, sep='\t', index=False, lineterminator='\n')
        body = buffer.getvalue()
        checksum = hashlib.sha256(body.encode('utf-8')).hexdigest()
        return f'{body}{CHECKSUM_PREFIX}{checksum}\n'

    def save(self) -> Path:
        self.db_dir.mkdir(parents=True, exist_ok=True)
        path = self.db_dir / DB_FILE
        tmp = path.with_name(path.name + '.tmp')
        tmp.write_bytes(self.to_text().encode('utf-8'))
        tmp.replace(path)
        logger.info("Wrote baseline of %d entries to %s", len(self), path)
        return path

    def validate_structure(self, frame: pd.DataFrame) -> Tuple[bool, List[str]]:
        """
        Check the table has every required column.

        Returns:
            Tuple of (is_valid, missing_columns)
        """
        missing = [c for c in self.REQUIRED_COLUMNS if c not in frame.columns]
        return not missing, missing

    @classmethod
    def load(cls, db_dir: Union[str, Path]) -> 'BaselineDb':
        """
        Load and verify a baseline directory.

        Raises:
            BaselineError: If baseline.tsv is missing
            BaselineCorruptError: If the header, checksum or any row is invalid
        """
        db_dir = Path(db_dir)
        path = db_dir / DB_FILE
        try:
            text = path.read_bytes().decode('utf-8')
        except (OSError, UnicodeDecodeError) as e:
            raise BaselineError(f"Cannot read baseline {path}: {e}") from e

        lines = text.splitlines(keepends=True)
        if len(lines) < 3 or not lines[-1].startswith(CHECKSUM_PREFIX):
            raise BaselineCorruptError(f"Baseline {path} is truncated (no checksum line)")
        body = ''.join(lines[:-1])
        expected = lines[-1][len(CHECKSUM_PREFIX):].strip()
        if hashlib.sha256(body.encode('utf-8')).hexdigest() != expected:
            raise BaselineCorruptError(f"Baseline {path} body checksum mismatch")

        header = _HEADER.match(lines[0].rstrip('\n'))
        if header is None:
            raise BaselineCorruptError(f"Baseline {path} has an unknown header: {lines[0].strip()}")
        db = cls(db_dir, fs_type=header.group('fs'), case_insensitive=header.group('ci') == '1')

        frame = pd.read_csv(io.StringIO(''.join(lines[1:-1])), sep='\t', dtype=str, keep_default_na=False)
        is_valid, missing = db.validate_structure(frame)
        if not is_valid:
            raise BaselineCorruptError(f"Baseline {path} lacks columns: {', '.join(missing)}")

        for row in frame.itertuples(index=False):
            if not _SHA256.match(row.sha256) or not row.size.isdigit():
                raise BaselineCorruptError(f"Baseline {path} has an invalid row for {row.guest_path}")
            db.add(BaselineEntry(
                guest_path=row.guest_path,
                sha256=row.sha256,
                size=int(row.size),
                backup_relpath=row.backup_relpath or None,
            ))
        logger.debug("Loaded baseline of %d entries from %s", len(db), path)
        return db


def _file_digest(fs: GuestFilesystem, path: str) -> Optional[str]:
    """SHA-256 of a file in fs, or None when it cannot be read there."""
    try:
        ref = fs.resolve(path)
        if not ref.is_regular:
            return None
        return hashlib.sha256(fs.read_file(ref)).hexdigest()
    except (FilesystemError, UnsupportedFeatureError):
        return None


def snapshot_baseline(fs: GuestFilesystem, paths: Optional[Iterable[str]], db_dir: Union[str, Path],
                      with_backups: bool = False, base_fs: Optional[GuestFilesystem] = None) -> int:
    """
    Record the hash of every protected file of a trusted image.

    Args:
        fs: Filesystem of the trusted (initial) image
        paths: Protected paths, or None for every regular file
        db_dir: Database directory (rewritten)
        with_backups: Copy every file into backups/
        base_fs: Filesystem of the base image; files absent from it or
                 different there get a backup even without with_backups

    Returns:
        Number of entries written
    """
    db_dir = Path(db_dir)
    db_dir.mkdir(parents=True, exist_ok=True)
    backup_root = db_dir / BACKUP_DIR
    if backup_root.exists():
        shutil.rmtree(backup_root)

    if paths is None:
        candidates = [path for path, ref in fs.list_all_files() if ref.is_regular]
    else:
        candidates = [fs.normalize_path(p) for p in paths]

    db = BaselineDb(db_dir, fs_type=fs.fs_type, case_insensitive=fs.case_insensitive)
    missing: List[str] = []
    backup_names = ExportPaths(prefix=BACKUP_DIR)
    for path in sorted(set(candidates)):
        try:
            ref = fs.resolve(path)
            if not ref.is_regular:
                raise FilesystemError(f"{path} is not a regular file")
            content = fs.read_file(ref)
        except PathNotFoundError:
            logger.warning("Protected path %s not found; recorded as missing", path)
            missing.append(path)
            continue
        except (FilesystemError, UnsupportedFeatureError) as e:
            logger.warning("Protected path %s unreadable (%s); recorded as missing", path, e)
            missing.append(path)
            continue

        digest = hashlib.sha256(content).hexdigest()
        backup_relpath = None
        needs_backup = with_backups or (base_fs is not None and _file_digest(base_fs, path) != digest)
        if needs_backup:
            backup_relpath = backup_names.relpath(path)
            target = db_dir / backup_relpath
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(content)
        db.add(BaselineEntry(guest_path=path, sha256=digest, size=len(content), backup_relpath=backup_relpath))

    db.save()
    (db_dir / MISSING_FILE).write_text(''.join(f'{p}\n' for p in missing), encoding='utf-8')
    logger.info("Baseline snapshot: %d entries, %d missing", len(db), len(missing))
    return len(db)


def load_baseline(db_dir: Union[str, Path]) -> BaselineDb:
    return BaselineDb.load(db_dir)


def lookup(db: BaselineDb, guest_path: str) -> Optional[BaselineEntry]:
    return db.lookup(guest_path)


def verify_backups(db: BaselineDb) -> List[str]:
    """
    Re-hash every backup copy.

    Returns:
        Guest paths whose backup is missing or does not match the baseline hash
    """
    failures = []
    for entry in db.entries():
        try:
            db.read_backup(entry)
        except BaselineCorruptError as e:
            logger.error("%s", e)
            failures.append(entry.guest_path)
    return failures
