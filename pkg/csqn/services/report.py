"""Accuracy-matrix CSVs, multi-run aggregation and the SVG accuracy chart."""
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from csqn.errors import ConfigError, DataFormatError, DataMissingError

logger = logging.getLogger(__name__)

CHART_WIDTH = 640
CHART_HEIGHT = 400
CHART_MARGIN = 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2")


def write_r_csv(path: Path, R: np.ndarray) -> None:
    """Row i holds the accuracy on every task after training task i."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([f"task_{j}" for j in range(1, R.shape[1] + 1)])
        for row in R:
            writer.writerow([f"{value:.6f}" for value in row])


def read_r_csv(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataMissingError(f"accuracy matrix not found: {path}")
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if len(rows) < 2:
        raise DataFormatError(f"{path}: no accuracy rows")
    width = len(rows[0])
    try:
        values = [[float(v) for v in row] for row in rows[1:] if row]
    except ValueError as e:
        raise DataFormatError(f"{path}: {e}")
    if any(len(row) != width for row in values):
        raise DataFormatError(f"{path}: ragged rows")
    return np.array(values, dtype=np.float64)


def average_accuracy_curve(R: np.ndarray) -> np.ndarray:
    """Mean accuracy over the tasks seen so far, after each task."""
    R = np.asarray(R, dtype=np.float64)
    steps = R.shape[0]
    return np.array([R[i, :i + 1].mean() for i in range(steps)])


@dataclass
class RunRecord:
    """One run directory as the report sees it."""
    run_dir: Path
    label: str
    group: str
    R: np.ndarray

    @property
    def tasks(self) -> int:
        return self.R.shape[1]


@dataclass
class CurveGroup:
    """Seed replicates sharing a configuration."""
    label: str
    group: str
    runs: List[RunRecord] = field(default_factory=list)

    @property
    def curves(self) -> np.ndarray:
        return np.vstack([average_accuracy_curve(run.R) for run in self.runs])

    @property
    def mean(self) -> np.ndarray:
        return self.curves.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        # population std over replicates
        return self.curves.std(axis=0)


def run_label(config: Dict) -> str:
    """Method name as a chart label, e.g. `csqn-s(10)/btree` or `ewc`."""
    method = config.get("method", "unknown")
    if method not in ("csqn-b", "csqn-s"):
        return method
    label = f"{method}({config.get('M')})"
    strategy = config.get("strategy", "none")
    return label if strategy == "none" else f"{label}/{strategy}"


def load_run(run_dir: Path) -> RunRecord:
    """Read R.csv plus the label and group hash of a run directory."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise DataMissingError(f"run directory not found: {run_dir}")
    R = read_r_csv(run_dir / "R.csv")
    label, group = run_dir.name, run_dir.name
    manifest_path = run_dir / "manifest.json"
    metrics_path = run_dir / "metrics.json"
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text())
        label, group = manifest.get("label", label), manifest.get("group_hash", group)
    elif metrics_path.is_file():
        label = run_label(json.loads(metrics_path.read_text()).get("config", {}))
        group = label
    if R.shape[0] != R.shape[1]:
        logger.warning("%s: only %d of %d tasks completed", run_dir, R.shape[0], R.shape[1])
    return RunRecord(run_dir, label, group, R)


def group_runs(runs: Sequence[RunRecord]) -> List[CurveGroup]:
    """Group by (label, config hash ignoring the seed); all runs must share T and progress."""
    if not runs:
        raise ConfigError("no runs to report")
    shapes = {run.R.shape for run in runs}
    if len(shapes) != 1:
        detail = ", ".join(f"{run.run_dir}: {run.R.shape[0]}x{run.R.shape[1]}" for run in runs)
        raise ConfigError(f"incompatible runs (different task counts): {detail}")
    groups: Dict[tuple, CurveGroup] = {}
    for run in runs:
        key = (run.label, run.group)
        groups.setdefault(key, CurveGroup(run.label, run.group)).runs.append(run)
    return list(groups.values())


def write_report_csv(path: Path, groups: Sequence[CurveGroup]) -> None:
    """One row per (label, group, task): mean and std of the average accuracy."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["label", "group", "runs", "task", "mean", "std"])
        for group in groups:
            for step, (mean, std) in enumerate(zip(group.mean, group.std), start=1):
                writer.writerow([group.label, group.group[:12], len(group.runs), step,
                                 f"{mean:.6f}", f"{std:.6f}"])


def _scale(value: float, lo: float, hi: float, out_lo: float, out_hi: float) -> float:
    if hi == lo:
        return (out_lo + out_hi) / 2.0
    return out_lo + (value - lo) * (out_hi - out_lo) / (hi - lo)


def render_svg(groups: Sequence[CurveGroup], title: str = "Average accuracy after each task") -> str:
    """Plain SVG line chart; shaded bands show ± one std when replicates exist."""
    steps = len(groups[0].mean)
    lows = [float((g.mean - g.std).min()) for g in groups]
    highs = [float((g.mean + g.std).max()) for g in groups]
    y_lo, y_hi = max(0.0, min(lows) - 0.02), min(1.0, max(highs) + 0.02)
    left, right = CHART_MARGIN, CHART_WIDTH - CHART_MARGIN
    top, bottom = CHART_MARGIN, CHART_HEIGHT - CHART_MARGIN

    def x(step: int) -> float:
        return _scale(step, 1, steps, left, right)

    def y(value: float) -> float:
        return _scale(value, y_lo, y_hi, bottom, top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_WIDTH}" height="{CHART_HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{CHART_WIDTH / 2:.1f}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
    ]
    for step in range(1, steps + 1):
        parts.append(f'<text x="{x(step):.1f}" y="{bottom + 18}" text-anchor="middle" '
                     f'font-size="11">{step}</text>')
    for tick in np.linspace(y_lo, y_hi, 5):
        parts.append(f'<text x="{left - 6}" y="{y(tick) + 4:.1f}" text-anchor="end" '
                     f'font-size="11">{100 * tick:.1f}</text>')
    for index, group in enumerate(groups):
        colour = PALETTE[index % len(PALETTE)]
        if len(group.runs) > 1:
            upper = [f"{x(s):.1f},{y(v):.1f}" for s, v in enumerate(group.mean + group.std, 1)]
            lower = [f"{x(s):.1f},{y(v):.1f}" for s, v in enumerate(group.mean - group.std, 1)]
            parts.append(f'<polygon points="{" ".join(upper + lower[::-1])}" fill="{colour}" '
                         'fill-opacity="0.15" stroke="none"/>')
        points = " ".join(f"{x(s):.1f},{y(v):.1f}" for s, v in enumerate(group.mean, 1))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{right - 150}" y="{top + 16 * (index + 1)}" fill="{colour}" '
                     f'font-size="12">{group.label} (n={len(group.runs)})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def build_report(run_dirs: Sequence[Path], out_dir: Path) -> List[CurveGroup]:
    """Aggregate run directories into report.csv and report.svg under `out_dir`."""
    groups = group_runs([load_run(Path(d)) for d in run_dirs])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(out_dir / "report.csv", groups)
    (out_dir / "report.svg").write_text(render_svg(groups))
    for group in groups:
        logger.info("%s: %d run(s), final average accuracy %.4f ± %.4f",
                    group.label, len(group.runs), group.mean[-1], group.std[-1])
    return groups

