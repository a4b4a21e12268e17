"""
Exception hierarchy for the vmscan services.

Every error raised by a service derives from ScannerError so the command line
entry point can report it as one machine-readable line.
"""

from typing import List, Optional


class ScannerError(Exception):
    """Base exception for all vmscan errors."""
    pass


class TransportError(ScannerError):
    """Raised when the write-record transport cannot deliver records."""
    pass


class MalformedRecordError(TransportError):
    """Raised when a write record is meaningless (zero length)."""
    pass


class CorruptSpillError(TransportError):
    """
    Raised when a spill or trace file is not a whole number of records.

    Attributes:
        paths: Files that could not be decoded
        batches: Batches that were drained successfully before the error
                 was raised (the remaining sources are still drained)
    """

    def __init__(self, message: str, paths: Optional[List[str]] = None, batches=None):
        super().__init__(message)
        self.paths = list(paths or [])
        self.batches = list(batches or [])


class GeometryError(ScannerError):
    """Raised for invalid block geometry or out-of-range block addresses."""
    pass


class ImageError(ScannerError):
    """Base exception for disk image access errors."""
    pass


class BadMagicError(ImageError):
    """Raised when a header does not carry the expected magic number."""
    pass


class UnsupportedFeatureError(ImageError):
    """Raised when an image or filesystem uses a feature we refuse to misread."""
    pass


class WrongModeError(ImageError):
    """Raised when an overlay-only operation is used on a non-overlay image."""
    pass


class ImageIOError(ImageError):
    """
    Raised when reading or writing an image file fails.

    Attributes:
        layer: Path of the image in the backing chain that failed
    """

    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(f"{message} (layer: {layer})" if layer else message)
        self.layer = layer


class FilesystemError(ScannerError):
    """Base exception for guest filesystem reconstruction errors."""
    pass


class CorruptFsError(FilesystemError):
    """
    Raised when on-disk filesystem structures are inconsistent.

    Attributes:
        inode: Inode or MFT record number involved, when known
    """

    def __init__(self, message: str, inode: Optional[int] = None):
        super().__init__(f"{message} (inode {inode})" if inode is not None else message)
        self.inode = inode


class PathNotFoundError(FilesystemError):
    """Raised when a guest path does not resolve."""

    def __init__(self, path: str):
        super().__init__(f"No such file in guest filesystem: {path}")
        self.path = path


class MalformedRunListError(FilesystemError):
    """Raised when an NTFS mapping-pairs array is truncated or invalid."""
    pass


class BaselineError(ScannerError):
    """Raised when the baseline database cannot be read or written."""
    pass


class BaselineCorruptError(BaselineError):
    """Raised when the baseline body checksum or a backup copy does not verify."""
    pass


class RemediationError(ScannerError):
    """Raised when a remediation action cannot be carried out."""
    pass


class CorruptMapError(ScannerError):
    """Raised when a saved dirty block map is truncated or inconsistent."""
    pass


class WorkloadError(ScannerError):
    """Raised when a replay workload document or one of its operations is invalid."""
    pass
