"""Tests for the continual-learning loop and its metrics."""

import json
from dataclasses import replace

import numpy as np
import pytest

from csqn.services.curvature import CompactBfgsFactor, LowRankFactor
from csqn.services.data import TaskData, TaskSequence
from csqn.services.nn import Batch
from csqn.services.report import read_r_csv
from csqn.services.storage import load_checkpoint, load_state
from csqn.services.trainer import (
    accuracy,
    build_model,
    curvature_batch,
    evaluate,
    harvest_posterior,
    metrics,
    new_state,
    run_experiment,
    select_best,
    train_task,
    validation_select_lambda,
)


class TestMetrics:
    """Test ACC and BWT."""

    def test_perfect_matrix(self):
        acc, bwt = metrics(np.ones((4, 4)))
        assert acc == 1.0
        assert bwt == 0.0

    def test_three_task_example(self):
        R = np.array([
            [0.90, 0.10, 0.10],
            [0.85, 0.95, 0.10],
            [0.80, 0.90, 0.95],
        ])
        acc, bwt = metrics(R)
        assert acc == pytest.approx(0.883333, abs=1e-6)
        assert bwt == pytest.approx(-0.075, abs=1e-12)

    def test_no_forgetting(self):
        R = np.array([[0.7, 0.0], [0.7, 0.9]])
        assert metrics(R)[1] == pytest.approx(0.0)

    def test_single_task_has_no_bwt(self):
        acc, bwt = metrics(np.array([[0.8]]))
        assert acc == pytest.approx(0.8)
        assert bwt is None

    def test_uses_square_block(self):
        R = np.array([[0.5, 0.2, 0.1], [0.4, 0.6, 0.3]])
        acc, bwt = metrics(R)
        assert acc == pytest.approx(0.5)
        assert bwt == pytest.approx(-0.1)

    def test_empty(self):
        with pytest.raises(ValueError):
            metrics(np.zeros((0, 0)))


class TestTaskLoop:
    """Test training, evaluation and determinism."""

    def test_zero_lambda_ewc_equals_finetune(self, config_factory, synthetic_tasks):
        finetune = run_experiment(config_factory(method="finetune"), synthetic_tasks)
        ewc = run_experiment(config_factory(method="ewc", lam=0.0), synthetic_tasks)
        assert np.array_equal(finetune.theta, ewc.theta)
        assert np.array_equal(finetune.R, ewc.R)

    def test_first_task_is_method_independent(self, config_factory, synthetic_tasks):
        rows = [
            run_experiment(config_factory(method=method), synthetic_tasks).R[0]
            for method in ("finetune", "ewc", "csqn-s", "csqn-b")
        ]
        for row in rows[1:]:
            assert np.array_equal(row, rows[0])

    def test_same_seed_same_result(self, config_factory, synthetic_tasks):
        first = run_experiment(config_factory(), synthetic_tasks)
        second = run_experiment(config_factory(), synthetic_tasks)
        assert np.array_equal(first.theta, second.theta)
        assert np.array_equal(first.R, second.R)

    def test_thread_count_does_not_change_result(self, config_factory, synthetic_tasks):
        one = run_experiment(config_factory(threads=1), synthetic_tasks)
        four = run_experiment(config_factory(threads=4), synthetic_tasks)
        assert np.array_equal(one.theta, four.theta)

    def test_accuracies_are_fractions(self, config_factory, synthetic_tasks):
        result = run_experiment(config_factory(method="ewc"), synthetic_tasks)
        assert result.R.shape == (3, 3)
        assert np.all((result.R >= 0) & (result.R <= 1))
        assert result.acc == pytest.approx(result.R[-1].mean())
        assert len(result.per_task_time_s) == 3

    def test_evaluate_ignores_batch_size(self, config_factory, synthetic_tasks, rng):
        model = build_model(config_factory(), synthetic_tasks)
        theta = model.init_params(rng)
        whole = evaluate(model, theta, synthetic_tasks, "test", batch_size=1000)
        pieces = evaluate(model, theta, synthetic_tasks, "test", batch_size=7)
        assert np.array_equal(whole, pieces)

    def test_memory_grows_per_task(self, config_factory, synthetic_tasks):
        result = run_experiment(config_factory(method="csqn-s"), synthetic_tasks)
        columns = [m.factor_columns for m in result.memory]
        assert columns == sorted(columns)
        assert columns[-1] <= 3 * 3
        assert all(m.diagonal_vectors == 1 for m in result.memory)

    def test_ct_memory_is_bounded(self, config_factory, synthetic_tasks):
        result = run_experiment(config_factory(method="csqn-s", strategy="ct"), synthetic_tasks)
        assert all(m.factor_columns <= 3 for m in result.memory)
        assert all(m.factors == 1 for m in result.memory)

    @pytest.mark.parametrize("method", ["ewc", "csqn-s"])
    def test_huge_lambda_anchors_to_first_task(self, config_factory, synthetic_tasks, method):
        """Test λ=1e12 keeps θ near θ⁽¹⁾ through task 2 and task 1 is not forgotten."""
        two_tasks = replace(synthetic_tasks, tasks=synthetic_tasks.tasks[:2])

        def moves(config):
            thetas = {}
            result = run_experiment(config, two_tasks,
                                    on_task=lambda t, theta: thetas.update({t: theta.copy()}))
            step = thetas[2].astype(np.float64) - thetas[1].astype(np.float64)
            return float(np.linalg.norm(step)), result

        anchored, result = moves(config_factory(method=method, lam=1e12))
        free, _ = moves(config_factory(method="finetune"))
        assert anchored < 0.5 * free
        assert anchored < 0.5
        assert result.R[1, 0] >= result.R[0, 0] - 0.05


class TestEvaluate:
    """Test eval-mode accuracy on known models."""

    def test_zero_weights_score_class_zero_share(self, config_factory, synthetic_tasks):
        """Test an all-zero model predicts class 0 everywhere."""
        model = build_model(config_factory(), synthetic_tasks)
        theta = np.zeros(model.architecture.param_count, dtype=np.float32)
        scores = evaluate(model, theta, synthetic_tasks, "test")
        expected = [float(np.mean(task.test.labels == 0)) for task in synthetic_tasks.tasks]
        assert scores.tolist() == pytest.approx(expected, abs=1e-12)

    def test_memorized_task_scores_one(self, config_factory, rng):
        """Test a model trained to fit ten samples gets every one of them right."""
        labels = np.arange(10) % 2
        inputs = 0.1 * rng.standard_normal((10, 6))
        inputs[:, 0] += np.where(labels == 0, 5.0, -5.0)
        samples = Batch(inputs.astype(np.float32), labels)
        sequence = TaskSequence([TaskData("memorized", samples, samples, samples)],
                                input_dim=6, classes=2)
        config = config_factory(method="finetune", epochs=200, batch_size=10,
                                optimizer={"kind": "adam", "lr": 0.05})
        model = build_model(config, sequence)
        theta = model.init_params(np.random.default_rng(0))
        theta = train_task(model, theta, new_state(config), sequence.tasks[0], config, 1)
        assert evaluate(model, theta, sequence, "test").tolist() == [1.0]
        assert accuracy(model, theta, samples, batch_size=3) == 1.0


class TestHarvest:
    """Test posterior harvesting at a trained point."""

    def trained(self, config, sequence):
        model = build_model(config, sequence)
        theta = model.init_params(np.random.default_rng(0))
        return model, theta

    def test_finetune_harvests_nothing(self, config_factory, synthetic_tasks):
        config = config_factory(method="finetune")
        model, theta = self.trained(config, synthetic_tasks)
        harvest = harvest_posterior(model, theta, synthetic_tasks.tasks[0], config, 1)
        assert harvest.omega is None and harvest.factor is None

    def test_ewc_has_no_factor(self, config_factory, synthetic_tasks):
        config = config_factory(method="ewc")
        model, theta = self.trained(config, synthetic_tasks)
        harvest = harvest_posterior(model, theta, synthetic_tasks.tasks[0], config, 1)
        assert harvest.omega.shape == theta.shape
        assert np.all(harvest.omega >= 0)
        assert harvest.factor is None

    def test_sr1_factor(self, config_factory, synthetic_tasks):
        config = config_factory(method="csqn-s")
        model, theta = self.trained(config, synthetic_tasks)
        harvest = harvest_posterior(model, theta, synthetic_tasks.tasks[0], config, 1)
        assert isinstance(harvest.factor, LowRankFactor)
        assert harvest.factor.columns <= config.M
        assert harvest.factor.provenance == (1,)
        assert harvest.attempts >= harvest.pairs_accepted

    def test_bfgs_factor_drops_b0(self, config_factory, synthetic_tasks):
        config = config_factory(method="csqn-b")
        model, theta = self.trained(config, synthetic_tasks)
        harvest = harvest_posterior(model, theta, synthetic_tasks.tasks[0], config, 1)
        assert isinstance(harvest.factor, CompactBfgsFactor)
        assert harvest.factor.b0 is None
        assert harvest.factor.columns <= 2 * config.M

    def test_bfgs_reduced_under_strategy(self, config_factory, synthetic_tasks):
        config = config_factory(method="csqn-b", strategy="btree")
        model, theta = self.trained(config, synthetic_tasks)
        harvest = harvest_posterior(model, theta, synthetic_tasks.tasks[0], config, 1)
        assert isinstance(harvest.factor, LowRankFactor)

    def test_deterministic(self, config_factory, synthetic_tasks):
        config = config_factory(method="csqn-s")
        model, theta = self.trained(config, synthetic_tasks)
        first = harvest_posterior(model, theta, synthetic_tasks.tasks[1], config, 2)
        second = harvest_posterior(model, theta, synthetic_tasks.tasks[1], config, 2)
        assert np.array_equal(first.omega, second.omega)
        assert np.array_equal(first.factor.Z, second.factor.Z)

    def test_curvature_batch_is_capped(self, config_factory, synthetic_tasks):
        config = config_factory()
        batch = curvature_batch(synthetic_tasks.tasks[0], config, 1)
        assert len(batch) == 64
        again = curvature_batch(synthetic_tasks.tasks[0], config, 1)
        assert np.array_equal(batch.inputs, again.inputs)


class TestRunArtifacts:
    """Test files flushed during a run."""

    def test_files_written(self, config_factory, synthetic_tasks, tmp_path):
        result = run_experiment(config_factory(method="csqn-s"), synthetic_tasks, tmp_path)
        R = read_r_csv(tmp_path / "R.csv")
        assert np.allclose(R, result.R, atol=1e-6)
        doc = json.loads((tmp_path / "metrics.json").read_text())
        assert doc["status"] == "completed"
        assert doc["tasks_completed"] == 3
        assert doc["config"]["lambda"] == 10.0
        assert doc["acc"] == pytest.approx(result.acc)
        assert len(doc["memory_vectors"]) == 3
        state = load_state(tmp_path / "state.bin")
        assert state.tasks_completed == 3
        assert np.allclose(state.anchor, result.theta)
        theta, widths = load_checkpoint(tmp_path / "theta_task3.bin")
        assert np.array_equal(theta, result.theta)
        assert widths == (6, 8, 3)

    def test_failure_is_recorded(self, config_factory, synthetic_tasks, tmp_path):
        def explode(t, theta):
            if t == 2:
                raise RuntimeError("disk full")

        with pytest.raises(RuntimeError):
            run_experiment(config_factory(), synthetic_tasks, tmp_path, on_task=explode)
        doc = json.loads((tmp_path / "metrics.json").read_text())
        assert doc["status"] == "failed"
        assert doc["error"] == "disk full"
        assert read_r_csv(tmp_path / "R.csv").shape == (2, 3)


class TestLambdaSelection:
    """Test picking λ on validation accuracy."""

    def test_returns_grid_member(self, config_factory, synthetic_tasks):
        grid = [0.0, 1.0, 100.0]
        lam, scores = validation_select_lambda(config_factory(method="ewc"), synthetic_tasks, grid)
        assert lam in grid
        assert len(scores) == 3
        assert scores[grid.index(lam)] == max(scores)

    def test_ties_go_to_smaller_lambda(self, config_factory, synthetic_tasks):
        # finetune ignores λ, so every point scores the same
        lam, scores = validation_select_lambda(config_factory(method="finetune"),
                                               synthetic_tasks, [5.0, 0.5, 2.0])
        assert len(set(scores)) == 1
        assert lam == 0.5

    @pytest.mark.parametrize("values, scores, expected", [
        ([100.0, 10.0, 1000.0], [0.9, 0.9, 0.5], 1),
        ([3, 1, 2], [0.2, None, 0.7], 2),
        ([1, 2], [None, None], None),
        (["b", 5, "a"], [0.4, 0.4, 0.4], 1),
        (["b", "a"], [0.4, 0.4], 1),
    ])
    def test_select_best(self, values, scores, expected):
        assert select_best(values, scores) == expected

    def test_select_best_length_mismatch(self):
        with pytest.raises(ValueError):
            select_best([1, 2], [0.5])

    def test_empty_grid(self, config_factory, synthetic_tasks):
        with pytest.raises(ValueError):
            validation_select_lambda(config_factory(), synthetic_tasks, [])
