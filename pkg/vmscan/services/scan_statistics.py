"""
Scan statistics for vmscan.

This module summarises scan results: verdict counts, how many files the
dirty predicate let through and how many content bytes were read.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List

import pandas as pd

from ..models import ScanResult, Verdict

FINDING_VERDICTS = (Verdict.MODIFIED, Verdict.NEW, Verdict.DELETED, Verdict.SCAN_ERROR)


@dataclass
class ScanSummary:
    """
    Aggregate numbers of one scan.

    Attributes:
        files_checked: Results in the scan
        predicate_true: Files with dirty evidence
        files_content_read: Files whose content was hashed
        bytes_read: Content bytes read while hashing
        verdict_counts: Count per verdict value, every verdict present
    """
    files_checked: int = 0
    predicate_true: int = 0
    files_content_read: int = 0
    bytes_read: int = 0
    verdict_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def findings(self) -> int:
        return sum(self.verdict_counts.get(v.value, 0) for v in FINDING_VERDICTS)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['findings'] = self.findings
        return data


class ScanStatistics:
    """
    Calculates summary statistics for a list of scan results.

    This class handles:
    - Verdict distribution
    - Predicate hit and content read counts
    - Findings listing for reports
    """

    COLUMNS = ['path', 'verdict', 'hash', 'evidence_count', 'bytes_read', 'reason']

    def __init__(self, results: Iterable[ScanResult]):
        """
        Initialize the statistics.

        Args:
            results: Scan results (any order)
        """
        self.results = list(results)
        self.frame = self._to_frame(self.results)

    def _to_frame(self, results: List[ScanResult]) -> pd.DataFrame:
        rows = [{
            'path': r.path,
            'verdict': r.verdict.value,
            'hash': r.sha256,
            'evidence_count': len(r.evidence),
            'bytes_read': r.bytes_read,
            'reason': r.reason,
        } for r in results]
        return pd.DataFrame(rows, columns=self.COLUMNS)

    def verdict_distribution(self) -> Dict[str, int]:
        """
        Count results per verdict.

        Returns:
            Dictionary mapping every verdict value to its count, zeros included:
            {'Secure': 120, 'Modified': 2, 'New': 1, 'Deleted': 0, 'ScanError': 0}
        """
        counts = self.frame['verdict'].value_counts()
        return {v.value: int(counts.get(v.value, 0)) for v in Verdict}

    def calculate_summary_statistics(self) -> ScanSummary:
        """Compute every summary number at once."""
        frame = self.frame
        if frame.empty:
            return ScanSummary(verdict_counts=self.verdict_distribution())
        return ScanSummary(
            files_checked=len(frame),
            predicate_true=int((frame['evidence_count'] > 0).sum()),
            files_content_read=int(frame['hash'].notna().sum()),
            bytes_read=int(frame['bytes_read'].sum()),
            verdict_counts=self.verdict_distribution(),
        )

    def findings(self) -> pd.DataFrame:
        """Rows whose verdict needs attention, sorted by path."""
        mask = self.frame['verdict'].isin([v.value for v in FINDING_VERDICTS])
        return self.frame[mask].sort_values('path').reset_index(drop=True)


def summarize(results: Iterable[ScanResult]) -> ScanSummary:
    return ScanStatistics(results).calculate_summary_statistics()
