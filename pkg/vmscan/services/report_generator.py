"""
PDF scan report generation for vmscan.

This module renders a saved scan run as a PDF: run information, summary
numbers, a verdict chart and the table of findings.
"""

from datetime import datetime
from io import BytesIO
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
from xml.sax.saxutils import escape

from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Image, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from ..models import Verdict
from .scan_statistics import ScanStatistics
from .scanner import ScanRun

VERDICT_COLORS = {
    Verdict.SECURE.value: '#27ae60',
    Verdict.MODIFIED.value: '#e67e22',
    Verdict.NEW.value: '#3498db',
    Verdict.DELETED.value: '#8e44ad',
    Verdict.SCAN_ERROR.value: '#c0392b',
}


class ScanReportGenerator:
    """
    Builds PDF reports for scan runs.

    This class handles:
    - Document template and paragraph styles
    - The verdict distribution chart (matplotlib)
    - Summary and findings tables
    """

    def __init__(self, page_size=A4, hash_display_length: int = 16):
        """
        Initialize the generator.

        Args:
            page_size: Page size of the document (default: A4)
            hash_display_length: Hex digits of each hash shown (0 = full hash)
        """
        self.page_size = page_size
        self.hash_display_length = hash_display_length
        self.styles = getSampleStyleSheet()
        self._setup_custom_styles()
        self.buffer = None
        self.doc = None
        self.story = []

    def _setup_custom_styles(self):
        self.styles.add(ParagraphStyle(
            name='ReportTitle',
            parent=self.styles['Heading1'],
            fontSize=22,
            textColor=colors.HexColor('#1a1a1a'),
            spaceAfter=24,
            alignment=TA_CENTER,
            fontName='Helvetica-Bold'
        ))
        self.styles.add(ParagraphStyle(
            name='SectionHeader',
            parent=self.styles['Heading2'],
            fontSize=15,
            textColor=colors.HexColor('#2c3e50'),
            spaceAfter=10,
            spaceBefore=12,
            fontName='Helvetica-Bold'
        ))
        self.styles.add(ParagraphStyle(
            name='ReportBody',
            parent=self.styles['Normal'],
            fontSize=10,
            textColor=colors.HexColor('#333333'),
            spaceAfter=5,
            fontName='Helvetica'
        ))
        self.styles.add(ParagraphStyle(
            name='CenteredBody',
            parent=self.styles['ReportBody'],
            alignment=TA_CENTER
        ))

    def create_document(self, buffer: Optional[BytesIO] = None) -> SimpleDocTemplate:
        if buffer is None:
            buffer = BytesIO()
        self.buffer = buffer
        self.story = []
        self.doc = SimpleDocTemplate(
            self.buffer,
            pagesize=self.page_size,
            rightMargin=54,
            leftMargin=54,
            topMargin=60,
            bottomMargin=60,
            title='vmscan scan report',
        )
        return self.doc

    def add_heading(self, heading: str):
        self.story.append(Paragraph(heading, self.styles['SectionHeader']))

    def add_text(self, text: str, style: str = 'ReportBody'):
        self.story.append(Paragraph(text, self.styles[style]))

    def add_spacer(self, height: float = 0.2):
        self.story.append(Spacer(1, height * inch))

    def add_image(self, image_buffer: BytesIO, width: float = 6, height: float = 3.5):
        image_buffer.seek(0)
        self.story.append(Image(image_buffer, width=width * inch, height=height * inch))
        self.story.append(Spacer(1, 0.2 * inch))

    def add_table(self, data: List[List[Any]], col_widths: Optional[List[float]] = None):
        if not data:
            return
        table = Table(data, colWidths=col_widths, repeatRows=1)
        table.setStyle(self._create_default_table_style(len(data)))
        self.story.append(table)
        self.story.append(Spacer(1, 0.2 * inch))

    def _create_default_table_style(self, num_rows: int) -> TableStyle:
        style_commands = [
            ('GRID', (0, 0), (-1, -1), 0.5, colors.grey),
            ('ALIGN', (0, 0), (-1, -1), 'LEFT'),
            ('VALIGN', (0, 0), (-1, -1), 'MIDDLE'),
            ('FONTSIZE', (0, 1), (-1, -1), 8),
            ('LEFTPADDING', (0, 0), (-1, -1), 4),
            ('RIGHTPADDING', (0, 0), (-1, -1), 4),
            ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor('#2c3e50')),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, 0), 10),
        ]
        for i in range(2, num_rows, 2):
            style_commands.append(('BACKGROUND', (0, i), (-1, i), colors.HexColor('#f5f5f5')))
        return TableStyle(style_commands)

    def generate_verdict_chart(self, distribution: Dict[str, int]) -> Optional[BytesIO]:
        """
        Bar chart of results per verdict.

        Returns:
            PNG image buffer, or None when there are no results
        """
        if not any(distribution.values()):
            return None

        fig, ax = plt.subplots(figsize=(8, 4))
        verdicts = [v.value for v in Verdict]
        counts = [distribution.get(v, 0) for v in verdicts]
        bars = ax.bar(verdicts, counts, color=[VERDICT_COLORS[v] for v in verdicts],
                      edgecolor='#2c3e50', linewidth=1.2)
        ax.set_ylabel('Files', fontsize=11, fontweight='bold')
        ax.set_title('Verdicts', fontsize=13, fontweight='bold', pad=14)
        for bar in bars:
            height = bar.get_height()
            ax.text(bar.get_x() + bar.get_width() / 2., height, f'{int(height)}',
                    ha='center', va='bottom', fontsize=9, fontweight='bold')
        ax.set_yscale('symlog')
        ax.yaxis.grid(True, linestyle='--', alpha=0.7)
        ax.set_axisbelow(True)
        plt.tight_layout()

        buffer = BytesIO()
        plt.savefig(buffer, format='png', dpi=150, bbox_inches='tight')
        plt.close(fig)
        buffer.seek(0)
        return buffer

    def _short_hash(self, digest: Optional[str]) -> str:
        if not isinstance(digest, str) or not digest:
            return '-'
        if self.hash_display_length and len(digest) > self.hash_display_length:
            return digest[:self.hash_display_length] + '...'
        return digest

    def build(self) -> BytesIO:
        """
        Raises:
            ValueError: If create_document has not been called
        """
        if self.doc is None:
            raise ValueError("Document not created. Call create_document() first.")
        self.doc.build(self.story)
        self.buffer.seek(0)
        return self.buffer

    def generate_scan_report(self, run: ScanRun, max_findings: Optional[int] = None) -> BytesIO:
        """
        Generate the complete report for one scan run.

        Args:
            run: Loaded scan run
            max_findings: Rows of the findings table (default: all)

        Returns:
            BytesIO buffer holding the PDF
        """
        statistics = ScanStatistics(run.results)
        summary = statistics.calculate_summary_statistics()

        self.create_document()
        self.story.append(Paragraph('vmscan Scan Report', self.styles['ReportTitle']))

        self.add_heading('Scan')
        self.add_text(f'<b>Image:</b> {escape(run.image)}')
        self.add_text(f'<b>Mode:</b> {run.mode}')
        self.add_text(f'<b>Filesystem offset:</b> {run.fs_offset}')
        self.add_text(f'<b>Block size:</b> {run.block_size}')
        self.add_spacer(0.2)

        self.add_heading('Summary')
        summary_rows = [
            ['Measure', 'Value'],
            ['Files checked', str(summary.files_checked)],
            ['Dirty evidence found', str(summary.predicate_true)],
            ['Files hashed', str(summary.files_content_read)],
            ['Content bytes read', f'{summary.bytes_read:,}'],
            ['Findings', str(summary.findings)],
        ]
        self.add_table(summary_rows, col_widths=[3 * inch, 2 * inch])

        chart = self.generate_verdict_chart(summary.verdict_counts)
        if chart is not None:
            self.add_image(chart)

        self.add_heading('Findings')
        findings = statistics.findings()
        if findings.empty:
            self.add_text('No modified, new, deleted or unreadable files.')
        else:
            if max_findings is not None and len(findings) > max_findings:
                self.add_text(f'<i>Showing first {max_findings} of {len(findings)} findings</i>')
                findings = findings.head(max_findings)
            rows = [['Path', 'Verdict', 'SHA-256', 'Evidence']]
            for row in findings.itertuples(index=False):
                path = row.path if not isinstance(row.reason, str) else f'{row.path} ({row.reason})'
                rows.append([Paragraph(escape(path), self.styles['ReportBody']), row.verdict,
                             self._short_hash(row.hash), str(row.evidence_count)])
            self.add_table(rows, col_widths=[3.2 * inch, 0.9 * inch, 1.6 * inch, 0.7 * inch])

        self.add_spacer(0.4)
        self.add_text(f"<i>Report generated on {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}</i>",
                      style='CenteredBody')
        return self.build()


def write_scan_report(run: ScanRun, out_path: Union[str, Path], hash_display_length: int = 16) -> Path:
    """Render run to a PDF file."""
    out_path = Path(out_path)
    buffer = ScanReportGenerator(hash_display_length=hash_display_length).generate_scan_report(run)
    out_path.write_bytes(buffer.getvalue())
    return out_path
