"""
vmscan: out-of-VM incremental file scanning of disk images.

Dirty block maps built from block-write traces (RAW images) or QCOW2 overlay
allocation tell which files may have changed; only those are hashed and
compared against a baseline.
"""

__version__ = '1.0.0'
