"""Pytest configuration and shared fixtures."""

import os

import numpy as np
import pytest

from csqn.config import build_config
from csqn.services.curvature import CurvaturePairs
from csqn.services.data import synthetic_sequence
from csqn.services.nn import Batch, Mlp, MlpArchitecture


def pytest_collection_modifyitems(config, items):
    """Skip MNIST-scale tests unless CSQN_DATA points at the files."""
    if os.getenv("CSQN_DATA"):
        return
    skip = pytest.mark.skip(reason="CSQN_DATA is not set")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    """Seeded generator; every test gets the same stream."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_mlp():
    """4-5-3 ReLU network, 43 parameters, no dropout."""
    return Mlp(MlpArchitecture.build(4, [5], 3))


@pytest.fixture
def tiny_batch(rng):
    """Six samples for the 4-input, 3-class network."""
    return Batch(rng.standard_normal((6, 4)), rng.integers(0, 3, size=6))


@pytest.fixture
def spd_hessian(rng):
    """Random symmetric positive definite 10x10 matrix."""
    a = rng.standard_normal((10, 10))
    return a @ a.T + 10 * np.eye(10)


def quadratic_pairs(h: np.ndarray, m: int, rng: np.random.Generator) -> CurvaturePairs:
    """Pairs from f(x) = ½xᵀHx, where y = H·s exactly."""
    s = rng.standard_normal((h.shape[0], m))
    return CurvaturePairs.from_columns(s, h @ s)


@pytest.fixture
def pair_factory():
    return quadratic_pairs


@pytest.fixture
def synthetic_tasks():
    """Three small drifting-blob tasks."""
    return synthetic_sequence(tasks=3, dim=6, classes=3, shift=1.5, seed=7,
                              samples_per_class=40, eval_samples_per_class=15, separation=4.0)


def small_config(**updates):
    """Fast synthetic experiment configuration; keyword updates are top-level fields."""
    document = {
        "dataset": {
            "kind": "synthetic", "tasks": 3, "dim": 6, "classes": 3, "shift": 1.5,
            "separation": 4.0, "samples_per_class": 40, "eval_samples_per_class": 15,
            "synthetic_seed": 7,
        },
        "method": "csqn-s",
        "M": 3,
        "lambda": 10.0,
        "curvature": {"batch_size": 64},
        "architecture": {"hidden": [8], "dropout": 0.0},
        "optimizer": {"kind": "adam", "lr": 0.01},
        "epochs": 1,
        "batch_size": 16,
        "eval_batch_size": 50,
        "seed": 3,
    }
    if "lam" in updates:
        updates["lambda"] = updates.pop("lam")
    document.update(updates)
    return build_config(document)


@pytest.fixture
def config_factory():
    return small_config
