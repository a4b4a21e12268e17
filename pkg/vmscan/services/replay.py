"""
Workload replay for vmscan.

Applies a scripted write workload to a RAW image and emits the matching
block-write trace, standing in for a hypervisor write hook. A workload is a
JSON document:

    {"seed": 7,
     "operations": [
        {"op": "overwrite", "path": "/etc/passwd", "offset": 0, "data": "root:x"},
        {"op": "overwrite", "path": "/bin/login", "offset": 4096, "random_bytes": 100},
        {"op": "write", "offset": 1048576, "data_hex": "deadbeef"}
     ]}

"overwrite" rewrites bytes inside a file's existing content; "write" writes
raw image bytes at an image offset. There is no create operation: a new
file is the set of "write" operations turning the image before into the
image after (content blocks, inode, directory entry and bitmaps), such as
the byte diff of two renderings of a fixture filesystem.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from ..errors import WorkloadError
from .filesystem import GuestFilesystem
from .image import ImageHandle
from .trace_transport import TraceFileWriter

logger = logging.getLogger(__name__)

OPERATIONS = ('overwrite', 'write')


@dataclass
class WorkloadOperation:
    op: str
    offset: int
    path: Optional[str] = None
    data: Optional[bytes] = None
    random_bytes: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> 'WorkloadOperation':
        op = raw.get('op')
        if op not in OPERATIONS:
            raise WorkloadError(f"Unknown workload operation {op!r}")
        try:
            offset = int(raw.get('offset', 0))
        except (TypeError, ValueError) as e:
            raise WorkloadError(f"Invalid offset in {raw}") from e
        if offset < 0:
            raise WorkloadError(f"Negative offset in {raw}")

        if op == 'write':
            try:
                data = bytes.fromhex(raw['data_hex'])
            except (KeyError, ValueError) as e:
                raise WorkloadError(f"write needs a hex data_hex field: {raw}") from e
            if not data:
                raise WorkloadError(f"write needs at least one byte: {raw}")
            return cls(op=op, offset=offset, data=data)

        if 'path' not in raw:
            raise WorkloadError(f"overwrite needs a path: {raw}")
        if 'data' in raw:
            if not raw['data']:
                raise WorkloadError(f"overwrite data is empty: {raw}")
            return cls(op=op, offset=offset, path=raw['path'], data=str(raw['data']).encode('utf-8'))
        count = int(raw.get('random_bytes', 0))
        if count <= 0:
            raise WorkloadError(f"overwrite needs data or a positive random_bytes: {raw}")
        return cls(op=op, offset=offset, path=raw['path'], random_bytes=count)


@dataclass
class Workload:
    seed: int = 0
    operations: List[WorkloadOperation] = field(default_factory=list)

    @classmethod
    def from_dict(cls, raw: dict) -> 'Workload':
        if not isinstance(raw.get('operations'), list):
            raise WorkloadError("Workload needs an operations list")
        return cls(seed=int(raw.get('seed', 0)),
                   operations=[WorkloadOperation.from_dict(op) for op in raw['operations']])

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Workload':
        try:
            raw = json.loads(Path(path).read_text(encoding='utf-8'))
        except (OSError, ValueError) as e:
            raise WorkloadError(f"Cannot read workload {path}: {e}") from e
        return cls.from_dict(raw)


@dataclass
class ReplaySummary:
    operations: int = 0
    records: int = 0
    bytes_written: int = 0
    paths: List[str] = field(default_factory=list)


def _file_writes(fs: GuestFilesystem, path: str, offset: int, data: bytes) -> List[Tuple[int, bytes]]:
    """Split a write at a file offset into image writes along the file's extents."""
    ref = fs.resolve(path)
    if not ref.is_regular:
        raise WorkloadError(f"{path} is not a regular file")
    if offset + len(data) > ref.size:
        raise WorkloadError(f"Overwrite of {path} at {offset}+{len(data)} runs past its size {ref.size}")

    writes = []
    end = offset + len(data)
    for file_offset, image_offset, length in fs.logical_extents(ref):
        start = max(offset, file_offset)
        stop = min(end, file_offset + length)
        if start >= stop:
            continue
        if image_offset is None:
            raise WorkloadError(f"Overwrite of {path} touches a hole at file offset {start}")
        writes.append((image_offset + start - file_offset, data[start - offset:stop - offset]))
    return writes


def replay_workload(workload: Workload, image: ImageHandle, fs: GuestFilesystem,
                    trace_out: Union[str, Path], append: bool = False) -> ReplaySummary:
    """
    Apply a workload to a writable RAW image and write the matching trace.

    Every image write is recorded as one (offset, length) write record in
    the order it was applied.

    Args:
        workload: Parsed workload
        image: Image opened writable
        fs: Filesystem mounted from image (used to place overwrites)
        trace_out: Trace file to write
        append: Append to an existing trace instead of replacing it

    Returns:
        ReplaySummary
    """
    rng = np.random.default_rng(workload.seed)
    summary = ReplaySummary()
    with TraceFileWriter(trace_out, append=append) as trace:
        for operation in workload.operations:
            if operation.op == 'write':
                writes = [(operation.offset, operation.data)]
            else:
                data = operation.data if operation.data is not None else rng.bytes(operation.random_bytes)
                writes = _file_writes(fs, operation.path, operation.offset, data)
                summary.paths.append(operation.path)
            for offset, data in writes:
                image.write_guest(offset, data)
                trace.write(offset, len(data))
                summary.records += 1
                summary.bytes_written += len(data)
            summary.operations += 1
    logger.info("Replayed %d operations (%d write records, %d bytes) into %s",
                summary.operations, summary.records, summary.bytes_written, image.path)
    return summary
