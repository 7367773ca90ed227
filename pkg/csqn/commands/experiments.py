"""Command handlers for single runs and parameter sweeps."""
import logging
import re
import subprocess
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from csqn import __version__
from csqn.config import (
    OUTPUT_ROOT,
    apply_overrides,
    build_config,
    canonical_hash,
    config_hash,
    group_hash,
    parse_value,
    read_document,
    resolve_data_dir,
)
from csqn.errors import ConfigError, CsqnError
from csqn.schemas import ExperimentConfig, RunManifest, SweepPoint, SweepSummary
from csqn.services.data import TaskSequence, build_task_sequence
from csqn.services.report import run_label
from csqn.services.trainer import final_validation_score, run_experiment, select_best

logger = logging.getLogger(__name__)


def version_string() -> str:
    """Package version plus `git describe` when run from a checkout."""
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    if described.returncode != 0 or not described.stdout.strip():
        return __version__
    return f"{__version__}+{described.stdout.strip()}"


def _now() -> str:
    return datetime.now().isoformat()


def resolve_config(config_path: Optional[str], overrides: Sequence[str] = (),
                   seed: Optional[int] = None, threads: Optional[int] = None) -> ExperimentConfig:
    """Config file, then --set overrides, then the --seed/--threads shortcuts."""
    extra = list(overrides)
    if seed is not None:
        extra.append(f"seed={seed}")
    if threads is not None:
        extra.append(f"threads={threads}")
    document = read_document(config_path)
    apply_overrides(document, extra)
    return build_config(document)


def load_sequence(config: ExperimentConfig, data: Optional[str] = None) -> TaskSequence:
    """Synthetic tasks need no files; MNIST tasks resolve --data or CSQN_DATA."""
    if config.dataset.kind == "synthetic":
        return build_task_sequence(config.dataset)
    return build_task_sequence(config.dataset, data_dir=resolve_data_dir(data))


def default_run_dir(config: ExperimentConfig) -> Path:
    label = re.sub(r"[^A-Za-z0-9_.-]+", "_", run_label(config.echo()))
    return Path(config.output_dir or OUTPUT_ROOT) / f"{label}-seed{config.seed}-{config_hash(config)[:8]}"


def _write_manifest(path: Path, manifest: RunManifest) -> None:
    path.write_text(manifest.model_dump_json(indent=2))


def execute_run(config: ExperimentConfig, sequence: TaskSequence, out_dir: Path) -> Dict[str, Any]:
    """Run one experiment into `out_dir`, keeping manifest.json current."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config_hash=config_hash(config),
        group_hash=group_hash(config),
        label=run_label(config.echo()),
        started_at=_now(),
        status="processing",
        version=version_string(),
    )
    manifest_path = out_dir / "manifest.json"
    _write_manifest(manifest_path, manifest)
    try:
        result = run_experiment(config, sequence, out_dir=out_dir)
    except Exception:
        manifest.status = "failed"
        manifest.finished_at = _now()
        _write_manifest(manifest_path, manifest)
        raise
    manifest.status = "completed"
    manifest.finished_at = _now()
    manifest.artifacts = {
        "R": "R.csv",
        "metrics": "metrics.json",
        "state": "state.bin",
        "checkpoint": f"theta_task{len(sequence)}.bin",
    }
    _write_manifest(manifest_path, manifest)
    logger.info("Run finished: ACC %.4f, BWT %s, artifacts in %s", result.acc,
                "n/a" if result.bwt is None else f"{result.bwt:.4f}", out_dir)
    return {
        "acc": result.acc,
        "bwt": result.bwt,
        "validation_acc": final_validation_score(result),
    }


def cmd_run(config_path: Optional[str], overrides: Sequence[str] = (), out: Optional[str] = None,
            seed: Optional[int] = None, threads: Optional[int] = None,
            data: Optional[str] = None) -> int:
    """Execute one experiment; returns the process exit code."""
    try:
        # 1. Resolve configuration
        config = resolve_config(config_path, overrides, seed, threads)
        out_dir = Path(out) if out else default_run_dir(config)
        # 2. Build the task sequence
        sequence = load_sequence(config, data)
        # 3. Train and persist
        execute_run(config, sequence, out_dir)
        return 0
    except CsqnError as e:
        logger.error("%s error: %s", e.category, e.detail)
        return e.exit_code


def parse_grid(spec: str) -> Tuple[str, List[str]]:
    """`lambda=1e2,1e3,1e4` -> ("lambda", ["1e2", "1e3", "1e4"])."""
    if "=" not in spec:
        raise ConfigError(f"grid '{spec}' is not of the form KEY=V1,V2,...")
    key, raw = spec.split("=", 1)
    key = key.strip()
    raws = [v.strip() for v in raw.split(",") if v.strip()]
    if not key or not raws:
        raise ConfigError(f"grid '{spec}' names no key or no values")
    values = [parse_value(r) for r in raws]
    if any(values[i] == values[j] for i in range(len(values)) for j in range(i)):
        raise ConfigError(f"grid '{spec}' repeats a value")
    return key, raws


def pick_winner(points: Sequence[SweepPoint]) -> Optional[SweepPoint]:
    """Best validation accuracy; ties go to the smaller grid value."""
    index = select_best([p.value for p in points], [p.validation_acc for p in points])
    return None if index is None else points[index]


def _point_dir(root: Path, key: str, value: Any) -> Path:
    return root / re.sub(r"[^A-Za-z0-9_.+-]+", "_", f"{key}-{value}")


def cmd_sweep(config_path: Optional[str], grid: str, overrides: Sequence[str] = (),
              out: Optional[str] = None, seed: Optional[int] = None,
              threads: Optional[int] = None, data: Optional[str] = None,
              workers: int = 1) -> int:
    """One run per grid value into its own subdirectory, then summary.json."""
    try:
        key, raws = parse_grid(grid)
        values = [parse_value(raw) for raw in raws]
        configs = [
            resolve_config(config_path, [*overrides, f"{key}={raw}"], seed, threads)
            for raw in raws
        ]
        root = Path(out) if out else Path(configs[0].output_dir or OUTPUT_ROOT) / f"sweep-{key}"
        root.mkdir(parents=True, exist_ok=True)
        sequences: Dict[str, TaskSequence] = {}
        for config in configs:
            dataset_key = canonical_hash(config.dataset.model_dump(mode="json"))
            if dataset_key not in sequences:
                sequences[dataset_key] = load_sequence(config, data)
    except CsqnError as e:
        logger.error("%s error: %s", e.category, e.detail)
        return e.exit_code

    def run_point(index: int) -> Tuple[SweepPoint, int]:
        config = configs[index]
        point_dir = _point_dir(root, key, raws[index])
        point = SweepPoint(value=values[index], run_dir=str(point_dir))
        sequence = sequences[canonical_hash(config.dataset.model_dump(mode="json"))]
        try:
            scores = execute_run(config, sequence, point_dir)
        except CsqnError as e:
            logger.error("sweep point %s=%s failed: %s", key, values[index], e.detail)
            return point, e.exit_code
        except Exception:
            logger.exception("sweep point %s=%s crashed", key, values[index])
            return point, CsqnError.exit_code
        point.validation_acc = scores["validation_acc"]
        point.acc, point.bwt = scores["acc"], scores["bwt"]
        return point, 0

    logger.info("Sweeping %s over %d values with %d worker(s)", key, len(values), workers)
    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(values)))) as pool:
        outcomes = list(pool.map(run_point, range(len(values))))
    points = [point for point, _ in outcomes]
    winner = pick_winner(points)
    if winner is not None:
        winner.winner = True
    summary = SweepSummary(key=key, points=points, winner=None if winner is None else winner.value)
    (root / "summary.json").write_text(summary.model_dump_json(indent=2))
    for point in points:
        logger.info("%s=%s: validation acc %s%s", key, point.value,
                    "failed" if point.validation_acc is None else f"{point.validation_acc:.4f}",
                    "  <- winner" if point.winner else "")
    return max(code for _, code in outcomes)
