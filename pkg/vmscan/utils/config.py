"""
Configuration management for vmscan.

Settings are read from an INI file with one section per concern (transport,
geometry, report, paths, scan, logging). A missing file is written out with
the defaults below. The file location and the log level can also come from
the environment or a .env file.
"""

import configparser
import os
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv


DEFAULTS = {
    'transport': {
        'spill_dir': 'spill',
        'batch_capacity': '100000',
        'ring_slots': '4',
        'poll_interval_ms': '100',
    },
    'geometry': {
        'block_size': '4096',
        'fs_offset': 'auto',
    },
    'report': {
        'hash_display_length': '16',
    },
    'paths': {
        'baseline_dir': 'baseline',
        'map_archive_dir': 'map-archive',
    },
    'scan': {
        'workers': '1',
    },
    'logging': {
        'level': 'WARNING',
        'file': '',
    },
}

PACKAGE_CONFIG = Path(__file__).parent.parent / 'config.ini'
MAX_POLL_INTERVAL_MS = 100


class Config:
    """
    Scanner settings backed by an INI file.

    Typed getters return the fallback when a value does not parse, so a
    hand-edited file with a typo degrades to defaults instead of failing the
    hourly run. Command line flags override the values read here.

    Attributes:
        config_file (Path): INI file the settings were read from
    """

    def __init__(self, config_file: Optional[str] = None):
        """
        Read settings from config_file.

        Args:
            config_file: INI path; when omitted $VMSCAN_CONFIG (also read from
                         .env) and then the package config.ini are used
        """
        load_dotenv()
        self.config_file = Path(config_file or os.environ.get('VMSCAN_CONFIG') or PACKAGE_CONFIG)
        self._parser = configparser.ConfigParser()
        self._parser.read_dict(DEFAULTS)

        if self.config_file.exists():
            self._parser.read(self.config_file)
        else:
            self.save()

    def save(self):
        """Write the current settings back to config_file."""
        try:
            self.config_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.config_file, 'w') as f:
                self._parser.write(f)
        except OSError:
            # read-only install: run on defaults
            pass

    def get(self, section: str, key: str, fallback: Any = None) -> str:
        return self._parser.get(section, key, fallback=fallback)

    def _typed(self, reader, section: str, key: str, fallback):
        try:
            return reader(section, key, fallback=fallback)
        except ValueError:
            return fallback

    def get_int(self, section: str, key: str, fallback: int = 0) -> int:
        return self._typed(self._parser.getint, section, key, fallback)

    def set(self, section: str, key: str, value: Any):
        """Store value under section.key, creating the section when needed."""
        if not self._parser.has_section(section):
            self._parser.add_section(section)
        self._parser.set(section, key, str(value))

    # [transport]

    @property
    def spill_dir(self) -> Path:
        """Directory where the transport spills full batches."""
        return Path(self.get('transport', 'spill_dir', 'spill'))

    @property
    def batch_capacity(self) -> int:
        return self.get_int('transport', 'batch_capacity', 100000)

    @property
    def ring_slots(self) -> int:
        return self.get_int('transport', 'ring_slots', 4)

    @property
    def poll_interval(self) -> float:
        """Consumer polling period in seconds, capped at 100 ms."""
        interval_ms = self.get_int('transport', 'poll_interval_ms', MAX_POLL_INTERVAL_MS)
        return min(interval_ms, MAX_POLL_INTERVAL_MS) / 1000.0

    # [geometry]

    @property
    def block_size(self) -> int:
        return self.get_int('geometry', 'block_size', 4096)

    @block_size.setter
    def block_size(self, value: int):
        self.set('geometry', 'block_size', value)

    @property
    def fs_offset(self) -> Optional[int]:
        """Filesystem offset in bytes, or None to read it from the partition table."""
        value = self.get('geometry', 'fs_offset', 'auto').strip().lower()
        if value in ('', 'auto'):
            return None
        try:
            return int(value, 0)
        except ValueError:
            return None

    @fs_offset.setter
    def fs_offset(self, value: Optional[int]):
        self.set('geometry', 'fs_offset', 'auto' if value is None else value)

    # [report], [paths], [scan]

    @property
    def hash_display_length(self) -> int:
        return self.get_int('report', 'hash_display_length', 16)

    @property
    def baseline_dir(self) -> Path:
        return Path(self.get('paths', 'baseline_dir', 'baseline'))

    @property
    def map_archive_dir(self) -> Path:
        return Path(self.get('paths', 'map_archive_dir', 'map-archive'))

    @property
    def scan_workers(self) -> int:
        return max(1, self.get_int('scan', 'workers', 1))

    # [logging]

    @property
    def log_level(self) -> str:
        return os.environ.get('VMSCAN_LOG_LEVEL') or self.get('logging', 'level', 'WARNING')

    @property
    def log_file(self) -> Optional[Path]:
        value = self.get('logging', 'file', '')
        return Path(value) if value else None


_shared: Optional[Config] = None


def get_config(config_file: Optional[str] = None) -> Config:
    """
    Return the process-wide Config, creating it on first use.

    Args:
        config_file: INI path, honoured only when the instance is created
    """
    global _shared
    if _shared is None:
        _shared = Config(config_file)
    return _shared


def reset_config():
    """Drop the process-wide Config so the next get_config reads again."""
    global _shared
    _shared = None
