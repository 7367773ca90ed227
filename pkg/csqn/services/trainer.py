"""Continual-learning loop: train, evaluate, harvest curvature, consolidate."""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np

from csqn.errors import NumericalError
from csqn.schemas import ExperimentConfig, MemoryVectors, MetricsDocument
from csqn.services import curvature, storage
from csqn.services.data import TaskData, TaskSequence
from csqn.services.nn import EVAL, TRAIN, Batch, Mlp, MlpArchitecture, OptimizerState, optimizer_step
from csqn.services.regularizer import (
    RegularizerState,
    finish_task,
    penalty,
    strategy_memory_cost,
)
from csqn.services.report import write_r_csv

logger = logging.getLogger(__name__)

# Stream tags for independent seeded generators.
INIT_STREAM = 0
TRAIN_STREAM = 1
CURVATURE_BATCH_STREAM = 2
SAMPLING_STREAM = 3


@dataclass
class Harvest:
    """Posterior information collected at θ⁽ᵗ⁾."""
    omega: Optional[np.ndarray] = None
    factor: Optional[curvature.Factor] = None
    pairs_accepted: int = 0
    attempts: int = 0


@dataclass
class ExperimentResult:
    R: np.ndarray
    validation: np.ndarray
    acc: Optional[float]
    bwt: Optional[float]
    per_task_time_s: List[float] = field(default_factory=list)
    memory: List[MemoryVectors] = field(default_factory=list)
    theta: Optional[np.ndarray] = None


def build_model(config: ExperimentConfig, sequence: TaskSequence) -> Mlp:
    arch = MlpArchitecture.build(
        sequence.input_dim, config.architecture.hidden, sequence.classes,
        config.architecture.dropout,
    )
    return Mlp(arch)


def new_state(config: ExperimentConfig) -> RegularizerState:
    return RegularizerState(
        method=config.method, strategy=config.strategy, lam=config.lam,
        columns=config.reduction_columns,
    )


def train_task(model: Mlp, theta: np.ndarray, state: RegularizerState, task: TaskData,
               config: ExperimentConfig, t: int) -> np.ndarray:
    """Train on one task with cross-entropy plus the consolidated penalty."""
    rng = np.random.default_rng([config.seed, TRAIN_STREAM, t])
    optimizer = OptimizerState.from_settings(config.optimizer, theta.shape[0])
    regularized = state.active
    n = len(task.train)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses, penalties = [], []
        for start in range(0, n, config.batch_size):
            batch = task.train.take(order[start:start + config.batch_size])
            loss, grad = model.loss_and_grad(theta, batch, TRAIN, rng)
            step += 1
            if regularized:
                pen = penalty(state, theta)
                grad = grad + pen.gradient.astype(grad.dtype)
                penalties.append(pen.value)
                loss = loss + pen.value
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at task {t}, step {step}")
            theta, optimizer = optimizer_step(optimizer, theta, grad)
            losses.append(loss)
        logger.info(
            "task %d epoch %d: loss %.4f penalty %.4f", t, epoch, float(np.mean(losses)),
            float(np.mean(penalties)) if penalties else 0.0,
        )
    return theta


def curvature_batch(task: TaskData, config: ExperimentConfig, t: int) -> Batch:
    """Fixed seeded subset of the task's training data used for Ω and curvature sampling."""
    n = len(task.train)
    size = min(config.curvature.batch_size, n)
    rng = np.random.default_rng([config.seed, CURVATURE_BATCH_STREAM, t])
    return task.train.take(np.sort(rng.choice(n, size=size, replace=False)))


def harvest_posterior(model: Mlp, theta: np.ndarray, task: TaskData,
                      config: ExperimentConfig, t: int) -> Harvest:
    """Fisher diagonal and, for CSQN, the task's curvature factor at θ⁽ᵗ⁾."""
    if config.method == "finetune":
        return Harvest()
    batch = curvature_batch(task, config, t)
    theta64 = theta.astype(np.float64)
    omega, base_grad = model.fisher_and_grad(theta64, batch)
    if not config.is_csqn:
        return Harvest(omega=omega)

    def grad_fn(x: np.ndarray) -> np.ndarray:
        return model.loss_and_grad(x, batch, EVAL)[1]

    rule = curvature.SR1 if config.method == "csqn-s" else curvature.BFGS
    pairs = curvature.sample_sy(
        theta64, config.sampling_config(), omega, grad_fn,
        seed=(config.seed, SAMPLING_STREAM, t), rule=rule, b0=omega,
        base_grad=base_grad, threads=config.threads,
    )
    if rule == curvature.SR1:
        sr1 = curvature.build_sr1(omega, pairs)
        factor = curvature.z_from_sr1(sr1.X, sr1.A, provenance=(t,))
    else:
        factor = curvature.build_bfgs(omega, pairs, provenance=(t,))
        factor.b0 = None  # B₀ is carried by the accumulated diagonal
        if config.strategy != "none":
            factor = curvature.bfgs_to_z(factor)
    logger.info(
        "task %d: %d/%d curvature pairs accepted in %d attempts, %d factor columns",
        t, pairs.count, config.M, pairs.attempts, factor.columns,
    )
    return Harvest(omega, factor, pairs.count, pairs.attempts)


def accuracy(model: Mlp, theta: np.ndarray, batch: Batch, batch_size: int = 1000) -> float:
    correct = 0
    for start in range(0, len(batch), batch_size):
        chunk = batch.take(np.arange(start, min(start + batch_size, len(batch))))
        correct += int(np.count_nonzero(model.predict(theta, chunk.inputs) == chunk.labels))
    return correct / len(batch) if len(batch) else 0.0


def evaluate(model: Mlp, theta: np.ndarray, sequence: TaskSequence, split: str = "test",
             batch_size: int = 1000) -> np.ndarray:
    """Eval-mode top-1 accuracy on every task's split."""
    return np.array([
        accuracy(model, theta, getattr(task, split), batch_size) for task in sequence.tasks
    ])


def metrics(R: np.ndarray) -> Tuple[float, Optional[float]]:
    """ACC over the final row and BWT over the leading square block; BWT is None for T < 2."""
    R = np.asarray(R, dtype=np.float64)
    T = min(R.shape)
    if T == 0:
        raise ValueError("empty evaluation matrix")
    final = R[T - 1, :T]
    acc = float(final.mean())
    if T < 2:
        return acc, None
    bwt = float(np.mean(final[:T - 1] - np.diag(R)[:T - 1]))
    return acc, bwt


def _write_metrics(out_dir: Path, doc: MetricsDocument) -> None:
    (out_dir / "metrics.json").write_text(doc.model_dump_json(indent=2))


def run_experiment(config: ExperimentConfig, sequence: TaskSequence,
                   out_dir: Optional[Path] = None,
                   on_task: Optional[Callable[[int, np.ndarray], None]] = None) -> ExperimentResult:
    """Full task loop; R, metrics and state are flushed after every task."""
    T = len(sequence)
    model = build_model(config, sequence)
    theta = model.init_params(np.random.default_rng([config.seed, INIT_STREAM]))
    state = new_state(config)
    R = np.zeros((T, T))
    V = np.zeros((T, T))
    result = ExperimentResult(R, V, None, None, theta=theta)
    doc = MetricsDocument(config=config.echo())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(
        "Starting %s run: %d tasks, %d parameters, lambda=%g, strategy=%s",
        config.method, T, model.architecture.param_count, config.lam, config.strategy,
    )
    try:
        for t, task in enumerate(sequence.tasks, start=1):
            started = time.perf_counter()
            theta = train_task(model, theta, state, task, config, t)
            R[t - 1] = evaluate(model, theta, sequence, "test", config.eval_batch_size)
            V[t - 1] = evaluate(model, theta, sequence, "validation", config.eval_batch_size)
            harvest = harvest_posterior(model, theta, task, config, t)
            finish_task(state, theta, harvest.omega, harvest.factor)
            elapsed = time.perf_counter() - started
            cost = strategy_memory_cost(state)
            memory = MemoryVectors(task=t, factor_columns=cost.factor_columns,
                                   factors=cost.factors, diagonal_vectors=cost.diagonal_vectors)
            result.per_task_time_s.append(elapsed)
            result.memory.append(memory)
            result.theta = theta
            result.acc, result.bwt = metrics(R[:t, :t])
            logger.info(
                "task %d (%s) done in %.1fs: acc %.4f, stored %d factor columns in %d factors",
                t, task.name, elapsed, result.acc, cost.factor_columns, cost.factors,
            )
            doc.acc, doc.bwt = result.acc, result.bwt
            doc.validation_acc = float(V[t - 1, :t].mean())
            doc.tasks_completed = t
            doc.per_task_time_s = list(result.per_task_time_s)
            doc.memory_vectors = list(result.memory)
            if out_dir is not None:
                write_r_csv(out_dir / "R.csv", R[:t])
                _write_metrics(out_dir, doc)
                storage.save_state(out_dir / "state.bin", state)
                storage.save_checkpoint(out_dir / f"theta_task{t}.bin", theta,
                                        model.architecture.widths)
            if on_task is not None:
                on_task(t, theta)
    except Exception as e:
        doc.status = "failed"
        doc.error = str(e)
        if out_dir is not None:
            _write_metrics(out_dir, doc)
        raise
    doc.status = "completed"
    if out_dir is not None:
        _write_metrics(out_dir, doc)
    return result


def final_validation_score(result: ExperimentResult) -> float:
    """Mean validation accuracy over all tasks after the last one."""
    return float(result.validation[-1].mean())


def validation_select_lambda(config: ExperimentConfig, sequence: TaskSequence,
                             grid: Sequence[float]) -> Tuple[float, List[float]]:
    """Run once per λ and pick the best final mean validation accuracy; ties go to the smaller λ."""
    if not grid:
        raise ValueError("lambda grid is empty")
    scores = []
    for lam in grid:
        candidate = config.model_copy(update={"lam": float(lam)})
        logger.info("lambda selection: running lambda=%g", lam)
        scores.append(final_validation_score(run_experiment(candidate, sequence)))
    return float(grid[select_best(grid, scores)]), scores


def select_best(values: Sequence[Any], scores: Sequence[Optional[float]]) -> Optional[int]:
    """Index of the highest score; ties go to the smaller value, None scores are skipped.

    Numeric values order before anything else, which falls back to string order.
    """
    if len(values) != len(scores):
        raise ValueError(f"{len(values)} values but {len(scores)} scores")

    def order(index: int):
        value = values[index]
        if isinstance(value, (int, float)):
            return (0, value, "")
        return (1, 0, str(value))

    best = None
    for index in sorted(range(len(values)), key=order):
        score = scores[index]
        if score is None:
            continue
        if best is None or score > scores[best]:
            best = index
    return best
