"""Sampled quasi-Newton curvature around a trained parameter vector.

Pairs (s, y) are sampled around θ*, then assembled into a compact BFGS
representation B = B₀ − U·mid⁻¹·Uᵀ or a compact SR1 representation
B = B₀ + X·A⁻¹·Xᵀ. SR1 factors are reduced to B = B₀ + ZZᵀ with Z positive
semidefinite by construction. B₀ is always a nonnegative diagonal (a Fisher
diagonal), stored as a vector.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from csqn.errors import NumericalError, ShapeError
from csqn.schemas import SamplingConfig
from csqn.services import linalg

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], np.ndarray]

BFGS = "bfgs"
SR1 = "sr1"
MAX_CONDITION = 1e12
RESAMPLE_FACTOR = 3
NEGATIVE_QUAD_TOL = 1e-8


@dataclass
class CurvaturePairs:
    """Accepted pairs as columns of S and Y."""
    S: np.ndarray
    Y: np.ndarray
    requested: int
    attempts: int
    rule: str

    @property
    def count(self) -> int:
        return self.S.shape[1]

    @classmethod
    def from_columns(cls, S: np.ndarray, Y: np.ndarray, rule: str = SR1) -> "CurvaturePairs":
        S = linalg.as_dense(S, "S")
        Y = linalg.as_dense(Y, "Y")
        if S.shape != Y.shape:
            raise ShapeError(f"S {S.shape} and Y {Y.shape} differ")
        return cls(S, Y, requested=S.shape[1], attempts=S.shape[1], rule=rule)


@dataclass
class CompactBfgsFactor:
    """B = B₀ − U·mid⁻¹·Uᵀ with U = [B₀S | Y]."""
    U: np.ndarray
    mid: np.ndarray
    mid_inv: np.ndarray
    b0: Optional[np.ndarray] = None
    provenance: Tuple[int, ...] = ()

    @property
    def columns(self) -> int:
        return self.U.shape[1]

    def correction(self, v: np.ndarray) -> np.ndarray:
        if self.columns == 0:
            return np.zeros_like(v)
        return -(self.U @ (self.mid_inv @ (self.U.T @ v)))


@dataclass
class Sr1Factor:
    """B = B₀ + X·A⁻¹·Xᵀ before reduction to Z."""
    X: np.ndarray
    A: np.ndarray


@dataclass
class LowRankFactor:
    """Positive semidefinite correction ZZᵀ."""
    Z: np.ndarray
    provenance: Tuple[int, ...] = ()
    clamped: bool = False

    @property
    def columns(self) -> int:
        return self.Z.shape[1]

    def correction(self, v: np.ndarray) -> np.ndarray:
        if self.columns == 0:
            return np.zeros_like(v)
        return self.Z @ (self.Z.T @ v)

    @classmethod
    def empty(cls, n: int, provenance: Sequence[int] = ()) -> "LowRankFactor":
        return cls(np.zeros((n, 0)), tuple(provenance))


Factor = Union[CompactBfgsFactor, LowRankFactor]


def check_fisher(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim != 1:
        raise ShapeError(f"Fisher diagonal must be a vector, got shape {omega.shape}")
    if not np.all(np.isfinite(omega)):
        raise NumericalError("Fisher diagonal has non-finite entries")
    if np.any(omega < 0):
        raise NumericalError("Fisher diagonal has negative entries")
    return omega


def sampling_covariance(omega: np.ndarray, eps: float) -> np.ndarray:
    """Diagonal Σ = 1 / (Ω + ε·max(Ω))."""
    omega = check_fisher(omega)
    peak = float(omega.max()) if omega.size else 0.0
    if peak <= 0:
        raise NumericalError("Fisher diagonal is all zero; sampling covariance is undefined")
    return 1.0 / (omega + eps * peak)


def accepts(s: np.ndarray, y: np.ndarray, kappa: float, rule: str,
            b0: Optional[np.ndarray] = None) -> bool:
    """Curvature-pair acceptance test for BFGS or SR1 (the latter against B₀)."""
    ss = float(s @ s)
    if ss == 0.0:
        return False
    if rule == BFGS:
        return float(s @ y) > kappa * ss
    if rule == SR1:
        residual = y - b0 * s if b0 is not None else y
        return abs(float(s @ residual)) >= kappa * ss
    raise ValueError(f"unknown acceptance rule '{rule}'")


@dataclass
class _Draw:
    index: int
    s: np.ndarray
    y: np.ndarray


def _draw_pair(index: int, theta: np.ndarray, sqrt_sigma: np.ndarray, base_grad: np.ndarray,
               grad_fn: GradFn, cfg: SamplingConfig, seed: Sequence[int]) -> _Draw:
    rng = np.random.default_rng([*seed, index])
    # s = θ* − x̃ with x̃ ~ N(θ*, Σ)
    s = -sqrt_sigma * rng.standard_normal(theta.shape[0])
    if cfg.y_mode == "fd-hvp":
        norm = float(np.linalg.norm(s))
        direction = s / norm
        y = (grad_fn(theta + cfg.h * direction) - base_grad) * (norm / cfg.h)
    elif cfg.y_mode == "grad-diff":
        y = base_grad - grad_fn(theta - s)
    else:
        raise ValueError(f"unknown y-mode '{cfg.y_mode}'")
    return _Draw(index, s, np.asarray(y, dtype=np.float64))


def sample_sy(theta: np.ndarray, cfg: SamplingConfig, omega: np.ndarray, grad_fn: GradFn,
              seed: Sequence[int], rule: str = SR1, b0: Optional[np.ndarray] = None,
              base_grad: Optional[np.ndarray] = None, threads: int = 1,
              sigma: Optional[np.ndarray] = None) -> CurvaturePairs:
    """Sample up to M accepted (s, y) pairs around θ*.

    Attempt i draws from its own generator keyed by (*seed, i), so the accepted
    set is the first M accepted attempts in index order whatever `threads` is.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if sigma is None:
        sigma = sampling_covariance(omega, cfg.eps)
    sqrt_sigma = np.sqrt(sigma)
    if b0 is None:
        b0 = check_fisher(omega)
    if base_grad is None:
        base_grad = np.asarray(grad_fn(theta), dtype=np.float64)
    budget = RESAMPLE_FACTOR * cfg.M
    accepted: List[_Draw] = []
    attempts = 0

    def draw(i: int) -> _Draw:
        return _draw_pair(i, theta, sqrt_sigma, base_grad, grad_fn, cfg, seed)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        while len(accepted) < cfg.M and attempts < budget:
            chunk = range(attempts, min(attempts + cfg.M - len(accepted), budget))
            draws = list(pool.map(draw, chunk))
            for d in draws:
                attempts += 1
                ok = accepts(d.s, d.y, cfg.kappa, rule, b0)
                logger.debug("curvature attempt %d %s", d.index, "accepted" if ok else "rejected")
                if ok:
                    accepted.append(d)
                    if len(accepted) == cfg.M:
                        break
    if not accepted:
        raise NumericalError(
            f"no curvature pair passed the {rule.upper()} test (kappa={cfg.kappa:g}) "
            f"after {attempts} attempts"
        )
    rejected = attempts - len(accepted)
    if rejected > cfg.M // 2:
        logger.warning("%d of %d curvature samples rejected", rejected, attempts)
    S = np.column_stack([d.s for d in accepted])
    Y = np.column_stack([d.y for d in accepted])
    return CurvaturePairs(S, Y, requested=cfg.M, attempts=attempts, rule=rule)


def invert_middle(mid: np.ndarray, what: str, pairs: int) -> np.ndarray:
    """Inverse of a small symmetric matrix via its eigendecomposition."""
    eig = linalg.sym_eig(mid)
    magnitudes = np.abs(eig.eigenvalues)
    smallest = magnitudes.min()
    if smallest == 0 or magnitudes.max() / smallest > MAX_CONDITION:
        cond = np.inf if smallest == 0 else magnitudes.max() / smallest
        raise NumericalError(
            f"{what} is singular (condition {cond:.3g} > {MAX_CONDITION:g}) with {pairs} pairs"
        )
    v = eig.eigenvectors
    inv = (v / eig.eigenvalues) @ v.T
    return 0.5 * (inv + inv.T)


def _pair_products(b0: np.ndarray, pairs: CurvaturePairs) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    b0 = check_fisher(b0)
    if pairs.S.shape[0] != b0.shape[0]:
        raise ShapeError(f"pairs have {pairs.S.shape[0]} rows but B₀ has {b0.shape[0]}")
    b0s = b0[:, None] * pairs.S
    return b0s, linalg.matmul(pairs.S.T, b0s), linalg.matmul(pairs.S.T, pairs.Y)


def build_bfgs(b0: np.ndarray, pairs: CurvaturePairs,
               provenance: Sequence[int] = ()) -> CompactBfgsFactor:
    b0 = check_fisher(b0)
    m = pairs.count
    if m == 0:
        empty = np.zeros((0, 0))
        return CompactBfgsFactor(np.zeros((b0.shape[0], 0)), empty, empty, b0, tuple(provenance))
    b0s, sb0s, sy = _pair_products(b0, pairs)
    d = np.diag(np.diag(sy))
    lower = np.tril(sy, -1)
    mid = np.block([[sb0s, lower], [lower.T, -d]])
    mid = 0.5 * (mid + mid.T)
    mid_inv = invert_middle(mid, "BFGS middle matrix", m)
    return CompactBfgsFactor(np.hstack([b0s, pairs.Y]), mid, mid_inv, b0, tuple(provenance))


def build_sr1(b0: np.ndarray, pairs: CurvaturePairs) -> Sr1Factor:
    b0 = check_fisher(b0)
    if pairs.count == 0:
        return Sr1Factor(np.zeros((b0.shape[0], 0)), np.zeros((0, 0)))
    b0s, sb0s, sy = _pair_products(b0, pairs)
    lower = np.tril(sy, -1)
    a = np.diag(np.diag(sy)) + lower + lower.T - sb0s
    a = 0.5 * (a + a.T)
    invert_middle(a, "SR1 middle matrix", pairs.count)
    return Sr1Factor(pairs.Y - b0s, a)


def z_from_sr1(x: np.ndarray, a: np.ndarray, provenance: Sequence[int] = ()) -> LowRankFactor:
    """Z with ZZᵀ = X·A⁻¹·Xᵀ, or its PSD projection when A⁻¹ is indefinite."""
    x = linalg.as_dense(x, "X")
    a = linalg.as_dense(a, "A")
    if x.shape[1] != a.shape[0]:
        raise ShapeError(f"X has {x.shape[1]} columns but A is {a.shape}")
    if a.shape[0] == 0:
        return LowRankFactor.empty(x.shape[0], provenance)
    a_inv = invert_middle(a, "SR1 middle matrix", a.shape[0])
    chol = linalg.cholesky(a_inv)
    if chol is not None:
        return LowRankFactor(linalg.matmul(x, chol), tuple(provenance), clamped=False)
    eig = linalg.sym_eig(a_inv)
    gamma = np.maximum(eig.eigenvalues, 0.0)
    dropped = int(np.count_nonzero(eig.eigenvalues < 0))
    logger.warning("A⁻¹ is indefinite; clamped %d of %d eigenvalues", dropped, gamma.shape[0])
    _, r = linalg.qr((eig.eigenvectors * np.sqrt(gamma)).T)
    return LowRankFactor(linalg.matmul(x, r.T), tuple(provenance), clamped=True)


def bfgs_to_z(factor: CompactBfgsFactor) -> LowRankFactor:
    """PSD projection of the BFGS correction −U·mid⁻¹·Uᵀ as a Z factor.

    With U = Q·R the correction is Q·K·Qᵀ for K = −R·mid⁻¹·Rᵀ; keeping the
    nonnegative part of K gives Z = Q·W·sqrt(max(Λ, 0)).
    """
    n = factor.U.shape[0]
    if factor.columns == 0:
        return LowRankFactor.empty(n, factor.provenance)
    if n < factor.columns:
        raise ShapeError(f"BFGS factor has more columns ({factor.columns}) than rows ({n})")
    q, r = linalg.qr(factor.U)
    core = -(r @ factor.mid_inv @ r.T)
    eig = linalg.sym_eig(0.5 * (core + core.T))
    scale = max(float(np.abs(eig.eigenvalues).max()), 1.0)
    clamped = bool(np.any(eig.eigenvalues < -1e-12 * scale))
    lam = np.maximum(eig.eigenvalues, 0.0)
    return LowRankFactor(q @ (eig.eigenvectors * np.sqrt(lam)), factor.provenance, clamped)


def _as_hessian(factor) -> Tuple[np.ndarray, Factor]:
    if isinstance(factor, CompactBfgsFactor):
        if factor.b0 is None:
            raise ValueError("BFGS factor carries no B₀; use its correction instead")
        return factor.b0, factor
    b0, low_rank = factor
    return check_fisher(b0), low_rank


def factor_matvec(factor, v: np.ndarray) -> np.ndarray:
    """B·v for a CompactBfgsFactor or a (B₀, LowRankFactor) pair."""
    b0, part = _as_hessian(factor)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != b0.shape:
        raise ShapeError(f"vector of length {v.shape} against dimension {b0.shape[0]}")
    return b0 * v + part.correction(v)


def quad_form(factor, d: np.ndarray) -> float:
    """dᵀBd; warns when a BFGS form dips below −1e-8·‖d‖²."""
    d = np.asarray(d, dtype=np.float64)
    value = float(d @ factor_matvec(factor, d))
    if value < -NEGATIVE_QUAD_TOL * float(d @ d):
        logger.warning("negative curvature quadratic form %.3e", value)
    return value

