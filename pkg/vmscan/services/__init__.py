"""
Services of the vmscan scanner.
"""

from .baseline_db import BaselineDb, load_baseline, snapshot_baseline, verify_backups
from .dirty_map import DirtyBlockMap, archive_map, load_map, new_map, save_map
from .filesystem import GuestFilesystem, detect_filesystem, mount_filesystem
from .fs_ext4 import Ext4Fs, mount_ext4
from .fs_ntfs import NtfsFs, decode_run_list, mount_ntfs
from .image import ImageHandle, Qcow2Image, RawImage, list_partitions, locate_filesystem, open_image
from .remediation import build_restore_bundle, destroy_file_content
from .replay import Workload, replay_workload
from .report_generator import ScanReportGenerator
from .scan_statistics import ScanStatistics, ScanSummary
from .scanner import OverlayPredicate, ScanRequest, Scanner, SingleImagePredicate, export_dirty
from .trace_transport import Consumer, Producer, Recorder, SharedRing, Transport, read_trace_file

__all__ = [
    'BaselineDb', 'load_baseline', 'snapshot_baseline', 'verify_backups',
    'DirtyBlockMap', 'archive_map', 'load_map', 'new_map', 'save_map',
    'GuestFilesystem', 'detect_filesystem', 'mount_filesystem',
    'Ext4Fs', 'mount_ext4',
    'NtfsFs', 'decode_run_list', 'mount_ntfs',
    'ImageHandle', 'Qcow2Image', 'RawImage', 'list_partitions', 'locate_filesystem', 'open_image',
    'build_restore_bundle', 'destroy_file_content',
    'Workload', 'replay_workload',
    'ScanReportGenerator',
    'ScanStatistics', 'ScanSummary',
    'OverlayPredicate', 'ScanRequest', 'Scanner', 'SingleImagePredicate', 'export_dirty',
    'Consumer', 'Producer', 'Recorder', 'SharedRing', 'Transport', 'read_trace_file',
]
