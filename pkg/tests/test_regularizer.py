"""Tests for penalties, task accumulation and memory-reduction strategies."""

import numpy as np
import pytest

from csqn.errors import NumericalError, ShapeError
from csqn.services.curvature import CompactBfgsFactor, CurvaturePairs, LowRankFactor, build_bfgs
from csqn.services.regularizer import (
    BTREE,
    CT,
    MRT,
    NONE,
    RegularizerState,
    StoredFactor,
    csqn_penalty,
    ewc_penalty,
    finish_task,
    penalty,
    reduce_btree,
    reduce_ct,
    strategy_memory_cost,
)

N = 12


def low_rank(rng, columns, task, n=N):
    return LowRankFactor(rng.standard_normal((n, columns)), (task,))


def run_tasks(method, strategy, tasks, rng, columns=4, per_task=2, lam=3.0):
    state = RegularizerState(method=method, strategy=strategy, lam=lam, columns=columns)
    for t in range(1, tasks + 1):
        theta = rng.standard_normal(N)
        omega = rng.uniform(0.0, 2.0, N)
        finish_task(state, theta, omega, low_rank(rng, per_task, t))
    return state


def numeric_gradient(state, theta, h=1e-4):
    grad = np.zeros_like(theta)
    for i in range(theta.shape[0]):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += h
        minus[i] -= h
        grad[i] = (penalty(state, plus).value - penalty(state, minus).value) / (2 * h)
    return grad


class TestEwcPenalty:
    """Test the diagonal penalty."""

    def test_hand_arithmetic(self):
        state = RegularizerState(method="ewc", lam=2.0)
        finish_task(state, np.zeros(2), np.array([1.0, 2.0]))
        result = ewc_penalty(state, np.array([1.0, 1.0]))
        assert result.value == pytest.approx(3.0)
        assert np.allclose(result.gradient, [2.0, 4.0])

    def test_zero_at_anchor(self, rng):
        state = run_tasks("ewc", NONE, 2, rng)
        result = penalty(state, state.anchor.copy())
        assert result.value == 0.0
        assert np.array_equal(result.gradient, np.zeros(N))

    def test_gradient_matches_finite_differences(self, rng):
        state = run_tasks("ewc", NONE, 3, rng)
        theta = state.anchor + rng.standard_normal(N)
        analytic = penalty(state, theta).gradient
        assert np.allclose(analytic, numeric_gradient(state, theta), rtol=1e-6, atol=1e-8)

    def test_accumulates_fisher(self, rng):
        state = RegularizerState(method="ewc", lam=1.0)
        omegas = [rng.integers(0, 5, N).astype(float) for _ in range(3)]
        for omega in omegas:
            finish_task(state, rng.standard_normal(N), omega, low_rank(rng, 2, 1))
        assert np.array_equal(state.b0, sum(omegas))
        assert state.factors == []


class TestCsqnPenalty:
    """Test the quasi-Newton penalty."""

    def test_zero_at_anchor(self, rng):
        state = run_tasks("csqn-s", NONE, 2, rng)
        result = csqn_penalty(state, state.anchor.copy())
        assert result.value == 0.0
        assert np.array_equal(result.gradient, np.zeros(N))

    def test_matches_dense_sum(self, rng):
        state = run_tasks("csqn-s", NONE, 3, rng)
        theta = rng.standard_normal(N)
        d = theta - state.anchor
        dense = np.diag(state.b0) + sum(f.factor.Z @ f.factor.Z.T for f in state.factors)
        result = csqn_penalty(state, theta)
        assert result.value == pytest.approx(0.5 * 3.0 * d @ dense @ d, rel=1e-12)
        assert np.allclose(result.gradient, 3.0 * dense @ d, rtol=1e-12)

    def test_no_factors_equals_ewc(self, rng):
        state = run_tasks("csqn-s", NONE, 2, rng)
        state.factors = []
        theta = rng.standard_normal(N)
        assert csqn_penalty(state, theta).value == pytest.approx(ewc_penalty(state, theta).value,
                                                                  rel=1e-12)

    def test_zero_pairs_equals_ewc(self, rng):
        state = RegularizerState(method="csqn-s", lam=5.0)
        ewc = RegularizerState(method="ewc", lam=5.0)
        for t in range(1, 4):
            theta, omega = rng.standard_normal(N), rng.uniform(0.0, 1.0, N)
            finish_task(state, theta, omega, LowRankFactor.empty(N, (t,)))
            finish_task(ewc, theta, omega)
        for _ in range(20):
            theta = rng.standard_normal(N)
            a, b = penalty(state, theta), penalty(ewc, theta)
            assert a.value == pytest.approx(b.value, rel=1e-12)
            assert np.allclose(a.gradient, b.gradient, rtol=1e-12)

    @pytest.mark.parametrize("strategy", [NONE, CT, BTREE, MRT])
    @pytest.mark.parametrize("tasks", [1, 3])
    def test_gradient_matches_finite_differences(self, rng, strategy, tasks):
        state = run_tasks("csqn-s", strategy, tasks, rng, columns=3)
        theta = state.anchor + rng.standard_normal(N)
        analytic = penalty(state, theta).gradient
        assert np.allclose(analytic, numeric_gradient(state, theta), rtol=1e-6, atol=1e-8)

    def test_bfgs_factor_gradient(self, rng):
        h = np.diag(rng.uniform(1.0, 3.0, N))
        s = rng.standard_normal((N, 3))
        omega = rng.uniform(0.1, 0.5, N)
        factor = build_bfgs(omega, CurvaturePairs.from_columns(s, h @ s, "bfgs"), (1,))
        factor.b0 = None
        state = RegularizerState(method="csqn-b", lam=2.0)
        finish_task(state, rng.standard_normal(N), omega, factor)
        theta = state.anchor + rng.standard_normal(N)
        assert isinstance(state.factors[0].factor, CompactBfgsFactor)
        assert penalty(state, theta).value > 0
        assert np.allclose(penalty(state, theta).gradient, numeric_gradient(state, theta),
                           rtol=1e-6, atol=1e-8)

    def test_nonnegative_for_z_factors(self, rng):
        state = run_tasks("csqn-s", BTREE, 5, rng, columns=3)
        for _ in range(200):
            assert penalty(state, rng.standard_normal(N) * 10).value >= 0.0

    def test_row_mismatch(self, rng):
        state = run_tasks("csqn-s", NONE, 1, rng)
        state.factors.append(StoredFactor(low_rank(rng, 2, 2, n=N + 1)))
        with pytest.raises(ShapeError):
            csqn_penalty(state, rng.standard_normal(N))


class TestPenaltyDispatch:
    """Test when the penalty is switched off."""

    def test_zero_before_first_task(self):
        state = RegularizerState(method="csqn-s", lam=10.0)
        result = penalty(state, np.ones(4))
        assert result.value == 0.0
        assert not state.active

    def test_finetune_is_always_zero(self, rng):
        state = RegularizerState(method="finetune", lam=10.0)
        finish_task(state, rng.standard_normal(N), rng.uniform(0, 1, N))
        assert penalty(state, rng.standard_normal(N)).value == 0.0
        assert not state.active

    def test_zero_lambda_is_inactive(self, rng):
        state = run_tasks("ewc", NONE, 1, rng, lam=0.0)
        assert not state.active

    def test_shape_checked(self, rng):
        state = run_tasks("ewc", NONE, 1, rng)
        with pytest.raises(ShapeError):
            penalty(state, np.zeros(N + 2))


class TestStateValidation:
    """Test state construction rules."""

    def test_strategy_needs_csqn(self):
        with pytest.raises(ValueError):
            RegularizerState(method="ewc", strategy=CT)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            RegularizerState(method="ewc", lam=-1.0)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            RegularizerState(method="si")

    def test_non_finite_anchor(self):
        state = RegularizerState(method="ewc", lam=1.0)
        with pytest.raises(NumericalError):
            finish_task(state, np.array([np.nan, 0.0]), np.ones(2))

    def test_fisher_order_does_not_matter(self, rng):
        omegas = [rng.integers(0, 9, N).astype(float) for _ in range(4)]
        forward = RegularizerState(method="ewc", lam=1.0)
        backward = RegularizerState(method="ewc", lam=1.0)
        for omega in omegas:
            finish_task(forward, np.zeros(N), omega)
        for omega in omegas[::-1]:
            finish_task(backward, np.zeros(N), omega)
        assert np.array_equal(forward.b0, backward.b0)


class TestFinishTask:
    """Test per-strategy bookkeeping."""

    def test_first_task_stores_factor(self, rng):
        state = run_tasks("csqn-s", NONE, 1, rng)
        assert len(state.factors) == 1
        assert state.tasks_completed == 1

    def test_none_keeps_every_task(self, rng):
        state = run_tasks("csqn-s", NONE, 4, rng)
        assert [f.factor.provenance for f in state.factors] == [(1,), (2,), (3,), (4,)]

    def test_mrt_keeps_latest(self, rng):
        state = RegularizerState(method="csqn-s", strategy=MRT, lam=1.0, columns=2)
        omegas = [rng.uniform(0, 1, N) for _ in range(2)]
        for t, omega in enumerate(omegas, start=1):
            finish_task(state, rng.standard_normal(N), omega, low_rank(rng, 2, t))
        assert len(state.factors) == 1
        assert state.factors[0].factor.provenance == (2,)
        assert np.allclose(state.b0, omegas[0] + omegas[1])

    def test_ct_keeps_one_factor(self, rng):
        state = run_tasks("csqn-s", CT, 5, rng, columns=3, per_task=3)
        assert len(state.factors) == 1
        assert state.factors[0].factor.columns == 3
        assert state.factors[0].factor.provenance == (1, 2, 3, 4, 5)

    def test_bfgs_is_converted_under_reduction(self, rng):
        h = np.diag(rng.uniform(1.0, 3.0, N))
        s = rng.standard_normal((N, 2))
        omega = rng.uniform(0.1, 0.5, N)
        factor = build_bfgs(omega, CurvaturePairs.from_columns(s, h @ s, "bfgs"), (1,))
        state = RegularizerState(method="csqn-b", strategy=CT, lam=1.0, columns=4)
        finish_task(state, np.zeros(N), omega, factor)
        assert isinstance(state.factors[0].factor, LowRankFactor)


class TestReduceCt:
    """Test concatenate-and-truncate reduction."""

    def test_passthrough_when_within_budget(self, rng):
        previous = low_rank(rng, 3, 1)
        reduced = reduce_ct(previous, LowRankFactor.empty(N, (2,)), 3)
        assert np.array_equal(reduced.Z, previous.Z)
        assert reduced.provenance == (1, 2)

    def test_keeps_larger_orthogonal_column(self):
        big = np.zeros((N, 1))
        big[0, 0] = 3.0
        small = np.zeros((N, 1))
        small[1, 0] = 1.0
        reduced = reduce_ct(LowRankFactor(big, (1,)), LowRankFactor(small, (2,)), 1)
        assert np.allclose(reduced.Z, np.sqrt(2.0) * big)

    def test_trace_matches_scaled_top_energy(self, rng):
        previous, new = low_rank(rng, 4, 1), low_rank(rng, 4, 2)
        reduced = reduce_ct(previous, new, 3)
        singular = np.linalg.svd(np.hstack([previous.Z, new.Z]), compute_uv=False)
        expected = (8 / 3) * np.sum(singular[:3] ** 2)
        assert np.trace(reduced.Z @ reduced.Z.T) == pytest.approx(expected, rel=1e-10)

    def test_clamped_flag_propagates(self, rng):
        a = LowRankFactor(rng.standard_normal((N, 2)), (1,), clamped=True)
        assert reduce_ct(a, low_rank(rng, 2, 2), 2).clamped


class TestReduceBtree:
    """Test binary-tree merging."""

    @pytest.mark.parametrize("tasks, levels", [
        (1, [0]),
        (2, [1]),
        (3, [1, 0]),
        (4, [2]),
        (7, [2, 1, 0]),
        (8, [3]),
    ])
    def test_levels_follow_binary_counter(self, rng, tasks, levels):
        stack = []
        for t in range(1, tasks + 1):
            stack = reduce_btree(stack, low_rank(rng, 2, t), 2)
        assert [f.level for f in stack] == levels
        assert len(stack) == bin(tasks).count("1")

    def test_lossless_budget_matches_none(self, rng):
        factors = [low_rank(rng, 2, t) for t in range(1, 5)]
        omegas = [rng.uniform(0, 1, N) for _ in range(4)]
        thetas = [rng.standard_normal(N) for _ in range(4)]
        none = RegularizerState(method="csqn-s", strategy=NONE, lam=1.0, columns=8)
        tree = RegularizerState(method="csqn-s", strategy=BTREE, lam=1.0, columns=8)
        for theta, omega, factor in zip(thetas, omegas, factors):
            finish_task(none, theta, omega, factor)
            finish_task(tree, theta, omega, factor)
        assert tree.levels == [2]
        for _ in range(50):
            theta = rng.standard_normal(N)
            assert penalty(tree, theta).value == pytest.approx(penalty(none, theta).value,
                                                               rel=1e-9)


class TestMemoryCost:
    """Test stored-vector accounting."""

    def test_none_grows_linearly(self, rng):
        state = run_tasks("csqn-s", NONE, 5, rng, per_task=20, columns=20)
        cost = strategy_memory_cost(state)
        assert (cost.factor_columns, cost.diagonal_vectors) == (100, 1)
        assert cost.total_vectors == 101

    def test_ct_is_constant(self, rng):
        state = run_tasks("csqn-s", CT, 6, rng, per_task=20, columns=20)
        assert strategy_memory_cost(state).factor_columns <= 20

    def test_btree_power_of_two(self, rng):
        state = run_tasks("csqn-s", BTREE, 8, rng, per_task=2, columns=2)
        assert strategy_memory_cost(state).factors == 1

    def test_finetune_stores_nothing(self, rng):
        state = RegularizerState(method="finetune")
        finish_task(state, np.zeros(N), None)
        cost = strategy_memory_cost(state)
        assert (cost.factor_columns, cost.factors, cost.diagonal_vectors) == (0, 0, 0)
