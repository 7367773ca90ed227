"""Command handler for aggregating finished runs into a report."""
import logging
from pathlib import Path
from typing import Optional, Sequence

from csqn.config import OUTPUT_ROOT
from csqn.errors import CsqnError
from csqn.services.report import build_report

logger = logging.getLogger(__name__)


def cmd_report(run_dirs: Sequence[str], out: Optional[str] = None) -> int:
    """Write report.csv and report.svg for one or more run directories."""
    out_dir = Path(out) if out else Path(OUTPUT_ROOT) / "report"
    try:
        build_report([Path(d) for d in run_dirs], out_dir)
    except CsqnError as e:
        logger.error("%s error: %s", e.category, e.detail)
        return e.exit_code
    logger.info("Report written to %s", out_dir)
    return 0
