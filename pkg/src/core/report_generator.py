"""
Selftest Report Generator

Renders the invariant suite table to a standalone HTML page.
"""

from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional
import logging

from jinja2 import BaseLoader, Environment

from .invariant_suite import SuiteResult
from .output import atomic_write_text, version_string

logger = logging.getLogger(__name__)


TEMPLATE = """
<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>recollide selftest - seed {{ result.seed }}</title>
    <style>
        body {
            font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, sans-serif;
            line-height: 1.5;
            color: #333;
            background: #f5f7fa;
            padding: 20px;
        }

        .container {
            max-width: 1100px;
            margin: 0 auto;
            background: white;
            border-radius: 8px;
            box-shadow: 0 2px 8px rgba(0,0,0,0.1);
            overflow: hidden;
        }

        header {
            background: linear-gradient(135deg, #667eea 0%, #764ba2 100%);
            color: white;
            padding: 24px 30px;
        }

        .content {
            padding: 24px 30px;
        }

        .status-pass { color: #10b981; font-weight: 600; }
        .status-fail { color: #ef4444; font-weight: 600; }

        table {
            width: 100%;
            border-collapse: collapse;
            margin-top: 16px;
        }

        th, td {
            padding: 8px 12px;
            text-align: left;
            border-bottom: 1px solid #e5e7eb;
            font-variant-numeric: tabular-nums;
        }

        th {
            background: #f9fafb;
            font-weight: 600;
        }

        footer {
            padding: 16px 30px;
            color: #6b7280;
            font-size: 13px;
        }
    </style>
</head>
<body>
    <div class="container">
        <header>
            <h1>Invariant suite</h1>
            <div class="subtitle">seed {{ result.seed }} | budget {{ result.budget }} | {{ timestamp }}</div>
        </header>
        <div class="content">
            <p>
                Overall:
                {% if result.passed %}<span class="status-pass">PASSED</span>{% else %}<span class="status-fail">FAILED</span>{% endif %}
                ({{ passed_count }}/{{ result.rows|length }} checks, {{ "%.1f"|format(result.wall_time_s) }} s)
            </p>
            <table>
                <thead>
                    <tr>
                        <th>Check</th>
                        <th>Checked</th>
                        <th>Violations</th>
                        <th>Max violation</th>
                        <th>Status</th>
                        <th>Detail</th>
                    </tr>
                </thead>
                <tbody>
                    {% for row in result.rows %}
                    <tr>
                        <td>{{ row.name }}</td>
                        <td>{{ row.checked }}</td>
                        <td>{{ row.violations }}</td>
                        <td>{{ "%.3e"|format(row.max_violation) }}</td>
                        <td class="{{ 'status-pass' if row.passed else 'status-fail' }}">{{ "pass" if row.passed else "FAIL" }}</td>
                        <td>{{ row.detail }}</td>
                    </tr>
                    {% endfor %}
                </tbody>
            </table>
        </div>
        <footer>
            <p>recollide {{ version }}</p>
        </footer>
    </div>
</body>
</html>
"""


class SelftestReportGenerator:
    """Generates the HTML page for an invariant suite run."""

    def __init__(self, result: SuiteResult, version: Optional[str] = None):
        self.result = result
        self.version = version or version_string()

    def render(self, timestamp: Optional[str] = None) -> str:
        env = Environment(loader=BaseLoader(), autoescape=True)
        template = env.from_string(TEMPLATE)
        return template.render(
            result=self.result,
            passed_count=sum(row.passed for row in self.result.rows),
            timestamp=timestamp or datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            version=self.version,
        )

    def generate_html_report(self, path: Path) -> Path:
        """
        Write the report atomically.

        Args:
            path: Target HTML file

        Returns:
            Path to generated report
        """
        path = atomic_write_text(path, self.render())
        logger.info(f"HTML report generated: {path}")
        return path

    def summary(self) -> Dict[str, Any]:
        return {
            "passed": self.result.passed,
            "checks": len(self.result.rows),
            "failures": self.result.failures,
        }
