"""Shared fixtures and deterministic hypothesis configuration."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from longmix import LongitudinalDataset, SubjectBlock

settings.register_profile(
    "ci",
    max_examples=25,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


def make_dataset(n=20, m=4, p=2, seed=0, beta=None, sigma=0.3, intercept=True):
    """Small gaussian dataset with one generating coefficient vector."""
    rng = np.random.default_rng(seed)
    beta = np.arange(1, p + 1, dtype=float) if beta is None else np.asarray(beta)
    subjects = []
    for i in range(n):
        X = rng.normal(size=(m, p))
        if intercept:
            X[:, 0] = 1.0
        y = X @ beta + sigma * rng.normal(size=m)
        subjects.append(SubjectBlock(subject_id=f"s{i:03d}", y=y, X=X))
    return LongitudinalDataset(subjects, [f"x{j + 1}" for j in range(p)])


def make_two_cluster_dataset(n=40, m=5, seed=0, sep=6.0, sigma=0.4):
    """Two well-separated gaussian regression components, equal weights."""
    rng = np.random.default_rng(seed)
    betas = np.array([[-sep / 2, 1.0], [sep / 2, -1.0]])
    subjects, labels = [], []
    for i in range(n):
        k = i % 2
        X = np.column_stack([np.ones(m), rng.uniform(-1, 1, size=m)])
        y = X @ betas[k] + sigma * rng.normal(size=m)
        subjects.append(SubjectBlock(subject_id=f"s{i:03d}", y=y, X=X))
        labels.append(k)
    return (
        LongitudinalDataset(subjects, ["x1", "x2"]),
        np.array(labels),
        betas,
    )


@pytest.fixture
def small_gaussian():
    return make_dataset(n=25, m=4, p=2, seed=11)


@pytest.fixture
def two_cluster():
    return make_two_cluster_dataset(seed=5)
