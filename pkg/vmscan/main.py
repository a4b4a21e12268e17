"""
Command line entry point for vmscan.

Exit codes: 0 clean, 3 findings, 2 usage error, 1 runtime error. Errors are
reported as one JSON line on standard error.
"""

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, TextIO

import pandas as pd

from .errors import CorruptSpillError, GeometryError, ScannerError
from .models import SECTOR_SIZE, ImageGeometry, ScanResult, Verdict
from .services.baseline_db import load_baseline, snapshot_baseline, verify_backups
from .services.dirty_map import DirtyBlockMap, archive_map
from .services.filesystem import GuestFilesystem, mount_filesystem
from .services.image import ImageHandle, locate_filesystem, open_image
from .services.remediation import SOURCE_UNRESTORABLE, build_restore_bundle, destroy_file_content
from .services.replay import Workload, replay_workload
from .services.report_generator import write_scan_report
from .services.scan_statistics import ScanStatistics
from .services.scanner import (
    OverlayPredicate,
    ScanRequest,
    ScanRun,
    Scanner,
    SingleImagePredicate,
    export_dirty,
    load_results,
    read_manifest,
    save_results,
)
from .services.trace_transport import Consumer, Recorder, SharedRing, Transport, read_trace_file, stream_trace
from .utils.config import Config, get_config
from .utils.logging_config import configure_logging

logger = logging.getLogger(__name__)

EXIT_CLEAN = 0
EXIT_RUNTIME_ERROR = 1
EXIT_USAGE = 2
EXIT_FINDINGS = 3


class UsageError(Exception):
    """Raised for invalid command lines."""
    pass


class ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def fs_offset_arg(value: str) -> int:
    """argparse type for --fs-offset: a non-negative multiple of the sector size."""
    try:
        offset = int(value, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid offset {value!r}")
    if offset < 0 or offset % SECTOR_SIZE:
        raise argparse.ArgumentTypeError(f"{offset} is not a non-negative multiple of {SECTOR_SIZE}")
    return offset


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='vmscan', description='Out-of-VM incremental disk image file scanner')
    parser.add_argument('--config', help='Configuration file (default: $VMSCAN_CONFIG or vmscan/config.ini)')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='More logging (-vv for debug)')
    parser.add_argument('--json', action='store_true', help='Machine readable output')

    geometry = ArgumentParser(add_help=False)
    geometry.add_argument('--fs-offset', type=fs_offset_arg, help='Filesystem byte offset (default: partition table)')
    geometry.add_argument('--block-size', type=int, help='Dirty map block size (default: config)')

    selection = ArgumentParser(add_help=False)
    group = selection.add_mutually_exclusive_group()
    group.add_argument('--paths', help='File listing guest paths, one per line')
    group.add_argument('--all', action='store_true', help='Every regular file of the filesystem')

    sub = parser.add_subparsers(dest='command', metavar='command', parser_class=ArgumentParser)
    sub.required = True

    p = sub.add_parser('baseline', parents=[geometry, selection], help='Snapshot file hashes of a trusted image')
    p.add_argument('image')
    p.add_argument('--db', help='Baseline directory (default: config paths.baseline_dir)')
    p.add_argument('--backups', action='store_true', help='Keep a backup copy of every file')

    p = sub.add_parser('ingest', help='Build a dirty block map from a write trace')
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--trace', help='Trace file of 16-byte write records')
    source.add_argument('--spill-dir', help='Drain spill files left by a producer')
    p.add_argument('--out', required=True, help='Dirty map file (merged when it exists)')
    p.add_argument('--image', help='Take the geometry from this image')
    p.add_argument('--fs-offset', type=fs_offset_arg)
    p.add_argument('--block-size', type=int)
    p.add_argument('--total-blocks', type=int)
    p.add_argument('--live', action='store_true', help='Stream the trace through the producer/consumer transport')

    p = sub.add_parser('scan-single', parents=[geometry, selection], help='Scan a RAW image using a dirty map')
    p.add_argument('image')
    p.add_argument('--map', required=True)
    p.add_argument('--baseline', required=True)
    p.add_argument('--results', help='Write the scan results to this JSON file')
    p.add_argument('--keep-map', action='store_true', help='Do not archive the map after the scan')
    p.add_argument('--workers', type=int)

    p = sub.add_parser('scan-overlay', parents=[geometry, selection], help='Scan a QCOW2 overlay')
    p.add_argument('overlay')
    p.add_argument('--baseline', required=True)
    p.add_argument('--results')
    p.add_argument('--workers', type=int)

    p = sub.add_parser('export', help='Copy out files flagged by a scan')
    p.add_argument('--results', required=True)
    p.add_argument('--out', required=True)

    p = sub.add_parser('destroy', parents=[geometry], help='Zero the content of a file in a RAW image')
    p.add_argument('image')
    p.add_argument('--path', required=True)
    p.add_argument('--i-know-what-im-doing', action='store_true', dest='confirmed')

    p = sub.add_parser('restore-bundle', parents=[geometry], help='Collect pristine copies of files')
    p.add_argument('--baseline', required=True)
    p.add_argument('--base', help='Base image holding original files')
    p.add_argument('--paths', required=True)
    p.add_argument('--out', required=True)

    p = sub.add_parser('replay', parents=[geometry], help='Apply a workload to a RAW image and write its trace')
    p.add_argument('image')
    p.add_argument('--workload', required=True)
    p.add_argument('--trace-out', required=True)

    p = sub.add_parser('report', help='Render scan results as a PDF')
    p.add_argument('--results', required=True)
    p.add_argument('--pdf', required=True)

    p = sub.add_parser('verify-baseline', help='Re-hash every baseline backup copy')
    p.add_argument('--baseline', required=True)
    return parser


class CommandRunner:
    """Runs one parsed command against a configuration."""

    def __init__(self, args: argparse.Namespace, config: Config, out: TextIO):
        self.args = args
        self.config = config
        self.out = out
        self.stack = contextlib.ExitStack()

    def emit(self, payload: dict, text: str) -> None:
        if self.args.json:
            self.out.write(json.dumps(payload, sort_keys=True) + '\n')
        else:
            self.out.write(text.rstrip('\n') + '\n')

    def open(self, path: str, writable: bool = False) -> ImageHandle:
        return self.stack.enter_context(open_image(path, writable=writable))

    def fs_offset(self, image: ImageHandle) -> int:
        offset = getattr(self.args, 'fs_offset', None)
        if offset is None:
            offset = self.config.fs_offset
            if offset is not None and (offset < 0 or offset % SECTOR_SIZE):
                raise UsageError(f"geometry.fs_offset {offset} is not a non-negative multiple of {SECTOR_SIZE}")
        return locate_filesystem(image) if offset is None else offset

    def block_size(self) -> int:
        return getattr(self.args, 'block_size', None) or self.config.block_size

    def mount(self, image: ImageHandle, offset: Optional[int] = None,
              block_size: Optional[int] = None) -> GuestFilesystem:
        if offset is None:
            offset = self.fs_offset(image)
        geometry = ImageGeometry.for_image(image.virtual_size, offset, block_size or self.block_size())
        return mount_filesystem(image, offset, geometry)

    def read_paths(self, path: str) -> List[str]:
        try:
            lines = Path(path).read_text(encoding='utf-8').splitlines()
        except OSError as e:
            raise UsageError(f"Cannot read path list {path}: {e}") from e
        return [line.strip() for line in lines if line.strip() and not line.lstrip().startswith('#')]

    def run(self) -> int:
        handler = getattr(self, 'cmd_' + self.args.command.replace('-', '_'))
        with self.stack:
            return handler()

    # Commands

    def cmd_baseline(self) -> int:
        image = self.open(self.args.image)
        fs = self.mount(image)
        base_fs = self.mount(image.backing, fs.partition_offset) if image.has_backing else None
        paths = self.read_paths(self.args.paths) if self.args.paths else None
        db_dir = Path(self.args.db) if self.args.db else self.config.baseline_dir
        count = snapshot_baseline(fs, paths, db_dir, with_backups=self.args.backups, base_fs=base_fs)
        self.emit({'command': 'baseline', 'entries': count, 'db': str(db_dir)},
                  f"Baseline of {count} files written to {db_dir}")
        return EXIT_CLEAN

    def _ingest_geometry(self) -> ImageGeometry:
        block_size = self.block_size()
        if self.args.image:
            image = self.open(self.args.image)
            return ImageGeometry.for_image(image.virtual_size, self.fs_offset(image), block_size)
        if self.args.fs_offset is None or self.args.total_blocks is None:
            raise UsageError("ingest needs --image or both --fs-offset and --total-blocks")
        geometry = ImageGeometry(header_offset=self.args.fs_offset, block_size=block_size,
                                 total_blocks=self.args.total_blocks)
        geometry.validate()
        return geometry

    def cmd_ingest(self) -> int:
        geometry = self._ingest_geometry()
        out = Path(self.args.out)
        dirty_map = DirtyBlockMap(geometry)
        corrupt: List[str] = []

        if self.args.trace and self.args.live:
            transport = Transport.create(self.config.spill_dir, slots=self.config.ring_slots,
                                         batch_capacity=self.config.batch_capacity)
            recorder = stream_trace(self.args.trace, transport, dirty_map, self.config.poll_interval)
            corrupt = recorder.corrupt_files
        elif self.args.trace:
            for batch in read_trace_file(self.args.trace, self.config.batch_capacity):
                dirty_map.mark_batch(batch)
        else:
            ring = SharedRing(slots=self.config.ring_slots, batch_capacity=self.config.batch_capacity)
            recorder = Recorder(Consumer(ring, self.args.spill_dir), dirty_map)
            recorder.drain_once()
            corrupt = recorder.corrupt_files

        if out.exists():
            previous = DirtyBlockMap.load(out)
            if previous.geometry != geometry:
                raise GeometryError(f"Existing map {out} has geometry {previous.geometry}, not {geometry}")
            previous.merge(dirty_map)
            previous.pre_fs_writes += dirty_map.pre_fs_writes
            previous.overflow_writes += dirty_map.overflow_writes
            dirty_map = previous
        dirty_map.save(out)

        payload = {
            'command': 'ingest',
            'map': str(out),
            'dirty_blocks': dirty_map.dirty_count,
            'total_blocks': geometry.total_blocks,
            'pre_fs_writes': dirty_map.pre_fs_writes,
            'overflow_writes': dirty_map.overflow_writes,
            'corrupt_files': corrupt,
        }
        self.emit(payload, f"{dirty_map.dirty_count} of {geometry.total_blocks} blocks dirty in {out} "
                           f"({dirty_map.pre_fs_writes} pre-filesystem, {dirty_map.overflow_writes} overflow writes)")
        if corrupt:
            self.out.flush()
            raise CorruptSpillError(f"Corrupt spill files renamed: {', '.join(corrupt)}", paths=corrupt)
        return EXIT_CLEAN

    def _scan(self, fs: GuestFilesystem, predicate, baseline) -> List[ScanResult]:
        workers = self.args.workers or self.config.scan_workers
        if self.args.all:
            request = ScanRequest.for_all(fs, predicate)
        else:
            paths = self.read_paths(self.args.paths) if self.args.paths else baseline.paths()
            if not paths:
                raise UsageError("Nothing to scan: the baseline is empty and no paths were given")
            request = ScanRequest(file_array=paths, predicate=predicate)
        return Scanner(fs, baseline, workers=workers).scan(request)

    def _finish_scan(self, mode: str, image: ImageHandle, fs: GuestFilesystem, results: List[ScanResult]) -> int:
        if self.args.results:
            run = ScanRun(image=str(image.path), mode=mode, fs_offset=fs.partition_offset,
                          block_size=fs.geometry.block_size, results=results)
            save_results(run, self.args.results)
        self.report_results(mode, results)
        findings = any(r.verdict is not Verdict.SECURE for r in results)
        return EXIT_FINDINGS if findings else EXIT_CLEAN

    def cmd_scan_single(self) -> int:
        dirty_map = DirtyBlockMap.load(self.args.map)
        baseline = load_baseline(self.args.baseline)
        image = self.open(self.args.image)
        fs = self.mount(image, block_size=dirty_map.geometry.block_size)
        results = self._scan(fs, SingleImagePredicate(dirty_map), baseline)
        code = self._finish_scan('single', image, fs, results)
        if not self.args.keep_map:
            archive_map(self.args.map, self.config.map_archive_dir)
        return code

    def cmd_scan_overlay(self) -> int:
        baseline = load_baseline(self.args.baseline)
        image = self.open(self.args.overlay)
        predicate = OverlayPredicate(image)
        fs = self.mount(image)
        results = self._scan(fs, predicate, baseline)
        return self._finish_scan('overlay', image, fs, results)

    def cmd_export(self) -> int:
        run = load_results(self.args.results)
        image = self.open(run.image)
        fs = self.mount(image, run.fs_offset, run.block_size)
        manifest = export_dirty(run.results, self.args.out, fs)
        rows = read_manifest(manifest)
        failed = int((rows['error'] != '').sum()) if not rows.empty else 0
        self.emit({'command': 'export', 'manifest': str(manifest), 'files': len(rows), 'failed': failed},
                  f"Exported {len(rows) - failed} files ({failed} failed); manifest {manifest}")
        return EXIT_CLEAN

    def cmd_destroy(self) -> int:
        if not self.args.confirmed:
            raise UsageError("destroy overwrites file content; pass --i-know-what-im-doing to confirm")
        image = self.open(self.args.image, writable=True)
        fs = self.mount(image)
        count = destroy_file_content(image, fs, self.args.path)
        self.emit({'command': 'destroy', 'path': self.args.path, 'zeroed': count},
                  f"Zeroed {count} blocks of {self.args.path}")
        return EXIT_CLEAN

    def cmd_restore_bundle(self) -> int:
        db = load_baseline(self.args.baseline)
        base_fs = self.mount(self.open(self.args.base)) if self.args.base else None
        manifest = build_restore_bundle(db, base_fs, self.read_paths(self.args.paths), self.args.out)
        rows = read_manifest(manifest)
        unrestorable = rows[rows['source'] == SOURCE_UNRESTORABLE]['guest_path'].tolist() if not rows.empty else []
        self.emit({'command': 'restore-bundle', 'manifest': str(manifest), 'files': len(rows),
                   'unrestorable': unrestorable},
                  f"Restore bundle with {len(rows) - len(unrestorable)} files, "
                  f"{len(unrestorable)} unrestorable; manifest {manifest}")
        return EXIT_FINDINGS if unrestorable else EXIT_CLEAN

    def cmd_replay(self) -> int:
        workload = Workload.load(self.args.workload)
        image = self.open(self.args.image, writable=True)
        fs = self.mount(image)
        summary = replay_workload(workload, image, fs, self.args.trace_out)
        self.emit({'command': 'replay', 'operations': summary.operations, 'records': summary.records,
                   'bytes_written': summary.bytes_written},
                  f"Replayed {summary.operations} operations as {summary.records} write records "
                  f"into {self.args.trace_out}")
        return EXIT_CLEAN

    def cmd_report(self) -> int:
        run = load_results(self.args.results)
        pdf = write_scan_report(run, self.args.pdf, self.config.hash_display_length)
        self.emit({'command': 'report', 'pdf': str(pdf)}, f"Report written to {pdf}")
        return EXIT_CLEAN

    def cmd_verify_baseline(self) -> int:
        db = load_baseline(self.args.baseline)
        failures = verify_backups(db)
        self.emit({'command': 'verify-baseline', 'entries': len(db), 'failures': failures},
                  f"{len(db)} entries, {len(failures)} backup failures" +
                  ''.join(f"\n  {path}" for path in failures))
        return EXIT_FINDINGS if failures else EXIT_CLEAN

    # Output

    def _short_hash(self, digest: Optional[str]) -> str:
        length = self.config.hash_display_length
        if not digest:
            return '-'
        return digest[:length] if length else digest

    def report_results(self, mode: str, results: List[ScanResult]) -> None:
        summary = ScanStatistics(results).calculate_summary_statistics()
        counts: Dict[str, int] = summary.verdict_counts
        if self.args.json:
            payload = {
                'command': f'scan-{mode}',
                'summary': summary.to_dict(),
                'results': [{key: r.to_dict()[key] for key in ('path', 'verdict', 'hash', 'evidence_count')}
                            for r in results],
            }
            self.out.write(json.dumps(payload, sort_keys=True) + '\n')
            return

        line = (f"{counts['Modified']} modified, {counts['New']} new, {counts['Deleted']} deleted, "
                f"{counts['ScanError']} errors, {counts['Secure']} secure")
        flagged = [r for r in results if r.verdict is not Verdict.SECURE]
        if flagged:
            table = pd.DataFrame([{
                'verdict': r.verdict.value,
                'path': r.path,
                'hash': self._short_hash(r.sha256),
                'evidence': len(r.evidence),
                'reason': r.reason or '',
            } for r in flagged])
            self.out.write(table.to_string(index=False) + '\n')
        self.out.write(line + '\n')


def run_command(argv: List[str], config: Optional[Config] = None,
                out: Optional[TextIO] = None, err: Optional[TextIO] = None) -> int:
    """
    Run one vmscan command.

    Args:
        argv: Arguments without the program name
        config: Configuration (default: --config, else the global configuration)
        out: Report stream (default: stdout)
        err: Error stream (default: stderr)

    Returns:
        Exit code
    """
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        err.write(json.dumps({'error': 'UsageError', 'message': str(e)}) + '\n')
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_CLEAN

    if config is None:
        config = Config(args.config) if args.config else get_config()
    configure_logging(config, args.verbose)

    try:
        return CommandRunner(args, config, out).run()
    except UsageError as e:
        err.write(json.dumps({'error': 'UsageError', 'message': str(e)}) + '\n')
        return EXIT_USAGE
    except ScannerError as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        err.write(json.dumps({'error': type(e).__name__, 'message': str(e)}) + '\n')
        return EXIT_RUNTIME_ERROR
    except OSError as e:
        err.write(json.dumps({'error': type(e).__name__, 'message': str(e)}) + '\n')
        return EXIT_RUNTIME_ERROR
    except Exception as e:
        logger.debug("Command %s failed unexpectedly", args.command, exc_info=True)
        err.write(json.dumps({'error': type(e).__name__, 'message': str(e)}) + '\n')
        return EXIT_RUNTIME_ERROR


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == '__main__':
    main()
