"""Shared builders for small random clustered competing-risks datasets."""
from __future__ import annotations

import numpy as np
import pytest

from crfrail.data import EventProbabilityMatrix, StudyDataset, effective_weights
from crfrail.varcov import VarCovSpec


def make_dataset(rng, N=4, m=2, K=2, p=1, q=1, ties=False, censor=0.3,
                 unequal=False, binary_x=False) -> StudyDataset:
    """Random dataset with observed event types.

    ``unequal`` draws cluster sizes in 1..m; ``ties`` rounds times so that
    several units share an event time.
    """
    sizes = rng.integers(1, m + 1, size=N) if unequal else np.full(N, m)
    n = int(sizes.sum())
    cluster = np.repeat(np.arange(1, N + 1), sizes)
    unit = np.concatenate([np.arange(1, s + 1) for s in sizes])
    time = rng.exponential(1.0, size=n) + 0.05
    if ties:
        time = np.round(time * 4) / 4 + 0.25
    delta = (rng.random(n) > censor).astype(int)
    if delta.sum() == 0:
        delta[0] = 1
    etype = np.where(delta == 1, rng.integers(1, K + 1, size=n), 0)
    if binary_x:
        X = rng.binomial(1, 0.5, size=(n, p)).astype(float)
    else:
        X = rng.normal(size=(n, p))
    W = rng.normal(size=(n, q)) + etype[:, None] if q else None
    return StudyDataset(cluster, unit, time, delta, etype, X, W, num_causes=K)


def random_probabilities(rng, dataset: StudyDataset) -> EventProbabilityMatrix:
    rows = dataset.event_rows
    P = rng.dirichlet(np.ones(dataset.num_causes), size=len(rows))
    return EventProbabilityMatrix.for_dataset(dataset, P)


def random_weights(rng, dataset: StudyDataset) -> np.ndarray:
    return effective_weights(dataset, "weighted", probs=random_probabilities(rng, dataset))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_instance(seed, ties=False, unequal=True):
    """Small random (dataset, weights, beta, v, covariance) tuple with K in 1..3."""
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 4))
    p = int(rng.integers(1, 3))
    ds = make_dataset(rng, N=int(rng.integers(2, 8)), m=3, K=K, p=p, ties=ties, unequal=unequal)
    w = random_weights(rng, ds)
    beta = rng.normal(scale=0.5, size=(K, p))
    v = rng.normal(scale=0.5, size=(ds.num_clusters, K))
    vc = VarCovSpec.unstructured(K, np.cov(rng.normal(size=(K, 3 * K))) + 0.2 * np.eye(K))
    return ds, w, beta, v, vc


def central_gradient(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        g.flat[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
