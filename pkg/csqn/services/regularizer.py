"""Task-posterior bookkeeping and the EWC / CSQN penalties.

All tasks are anchored at the most recent post-task parameters θ⁽ᵗ⁾. The
accumulated diagonal B₀ = ΣΩ⁽ʲ⁾ carries the EWC part of every task; stored
factors add the low-rank corrections on top of it:

    penalty(θ) = (λ/2)·dᵀ(B₀∘d + Σ corrections(d)),  d = θ − θ⁽ᵗ⁾
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from csqn.errors import NumericalError, ShapeError
from csqn.services import linalg
from csqn.services.curvature import (
    NEGATIVE_QUAD_TOL,
    CompactBfgsFactor,
    Factor,
    LowRankFactor,
    bfgs_to_z,
    check_fisher,
)

logger = logging.getLogger(__name__)

FINETUNE = "finetune"
EWC = "ewc"
CSQN_B = "csqn-b"
CSQN_S = "csqn-s"
METHODS = (FINETUNE, EWC, CSQN_B, CSQN_S)

NONE = "none"
CT = "ct"
BTREE = "btree"
MRT = "mrt"
STRATEGIES = (NONE, CT, BTREE, MRT)


@dataclass
class StoredFactor:
    """A factor plus its binary-tree level (0 outside BTREE)."""
    factor: Factor
    level: int = 0


@dataclass
class Penalty:
    value: float
    gradient: np.ndarray


@dataclass
class MemoryReport:
    """Stored vectors of length N besides θ itself."""
    factor_columns: int
    factors: int
    diagonal_vectors: int

    @property
    def total_vectors(self) -> int:
        return self.factor_columns + self.diagonal_vectors


@dataclass
class RegularizerState:
    method: str
    strategy: str = NONE
    lam: float = 0.0
    columns: int = 0
    anchor: Optional[np.ndarray] = None
    b0: Optional[np.ndarray] = None
    factors: List[StoredFactor] = field(default_factory=list)
    tasks_completed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}'")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy '{self.strategy}'")
        if self.strategy != NONE and self.method not in (CSQN_B, CSQN_S):
            raise ValueError(f"strategy '{self.strategy}' requires a CSQN method")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")

    @property
    def is_csqn(self) -> bool:
        return self.method in (CSQN_B, CSQN_S)

    @property
    def active(self) -> bool:
        """Whether the penalty can be nonzero."""
        return self.method != FINETUNE and self.tasks_completed > 0 and self.lam > 0

    @property
    def levels(self) -> List[int]:
        return [f.level for f in self.factors]


def _rows(factor: Factor) -> int:
    return factor.U.shape[0] if isinstance(factor, CompactBfgsFactor) else factor.Z.shape[0]


def _offset(state: RegularizerState, theta: np.ndarray) -> np.ndarray:
    if state.anchor is None:
        raise ValueError("no task has been completed; the penalty is undefined")
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != state.anchor.shape:
        raise ShapeError(f"θ has shape {theta.shape}, anchor has {state.anchor.shape}")
    return theta - state.anchor


def ewc_penalty(state: RegularizerState, theta: np.ndarray) -> Penalty:
    d = _offset(state, theta)
    weighted = state.b0 * d
    return Penalty(0.5 * state.lam * float(d @ weighted), state.lam * weighted)


def csqn_penalty(state: RegularizerState, theta: np.ndarray) -> Penalty:
    """EWC term on the accumulated B₀ plus every stored low-rank correction."""
    d = _offset(state, theta)
    bd = state.b0 * d
    for stored in state.factors:
        rows = _rows(stored.factor)
        if rows != d.shape[0]:
            raise ShapeError(f"stored factor has {rows} rows, anchor has {d.shape[0]}")
        bd = bd + stored.factor.correction(d)
    quad = float(d @ bd)
    if quad < -NEGATIVE_QUAD_TOL * float(d @ d):
        logger.warning("CSQN quadratic form is negative (%.3e)", quad)
    return Penalty(0.5 * state.lam * quad, state.lam * bd)


def penalty(state: RegularizerState, theta: np.ndarray) -> Penalty:
    """Penalty for the configured method; zero before the first task."""
    if state.method == FINETUNE or state.anchor is None:
        return Penalty(0.0, np.zeros(np.shape(theta), dtype=np.float64))
    if state.method == EWC:
        return ewc_penalty(state, theta)
    return csqn_penalty(state, theta)


def reduce_ct(previous: Optional[LowRankFactor], new: LowRankFactor,
              columns: int) -> LowRankFactor:
    """Concatenate and reduce to `columns` columns, rescaled by sqrt(M_b/M_a)."""
    parts = [f for f in (previous, new) if f is not None]
    stacked = np.hstack([f.Z for f in parts])
    provenance = tuple(sorted({t for f in parts for t in f.provenance}))
    clamped = any(f.clamped for f in parts)
    total = stacked.shape[1]
    if total <= columns:
        return LowRankFactor(stacked, provenance, clamped)
    reduced = linalg.gram_thin_svd(stacked, columns) * np.sqrt(total / columns)
    return LowRankFactor(reduced, provenance, clamped)


def reduce_btree(stack: List[StoredFactor], new: LowRankFactor,
                 columns: int) -> List[StoredFactor]:
    """Binomial-counter merge: equal levels on top of the stack are combined."""
    stack = list(stack) + [StoredFactor(new, 0)]
    while len(stack) >= 2 and stack[-1].level == stack[-2].level:
        newer = stack.pop()
        older = stack.pop()
        merged = reduce_ct(older.factor, newer.factor, columns)
        stack.append(StoredFactor(merged, older.level + 1))
    return stack


def _as_low_rank(factor: Factor) -> LowRankFactor:
    if isinstance(factor, CompactBfgsFactor):
        return bfgs_to_z(factor)
    return factor


def finish_task(state: RegularizerState, theta: np.ndarray, omega: Optional[np.ndarray],
                factor: Optional[Factor] = None) -> RegularizerState:
    """Move the anchor, accumulate Ω and store or merge the task's factor."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise NumericalError("cannot anchor at non-finite parameters")
    state.anchor = theta.copy()
    if omega is not None:
        omega = check_fisher(omega)
        state.b0 = omega.copy() if state.b0 is None else state.b0 + omega
    elif state.b0 is None:
        state.b0 = np.zeros_like(theta)
    state.tasks_completed += 1
    if not state.is_csqn or factor is None:
        return state
    if state.strategy == NONE:
        state.factors.append(StoredFactor(factor))
    elif state.strategy == CT:
        previous = state.factors[0].factor if state.factors else None
        state.factors = [StoredFactor(reduce_ct(previous, _as_low_rank(factor), state.columns))]
    elif state.strategy == BTREE:
        state.factors = reduce_btree(state.factors, _as_low_rank(factor), state.columns)
    elif state.strategy == MRT:
        state.factors = [StoredFactor(_as_low_rank(factor))]
    return state


def strategy_memory_cost(state: RegularizerState) -> MemoryReport:
    return MemoryReport(
        factor_columns=sum(f.factor.columns for f in state.factors),
        factors=len(state.factors),
        diagonal_vectors=1 if state.b0 is not None and state.method != FINETUNE else 0,
    )
