import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crfrail.classify import (MultinomialConfig, MultinomialModel, SeparationError,
                              fit_multinomial, impute_types, multinomial_loglik,
                              predict_probabilities)
from crfrail.classify import _loglik_grad_hess
from crfrail.data import DataValidationError, EventProbabilityMatrix, StudyDataset


def labeled(W, labels, K):
    """Every unit is its own cluster with an observed event."""
    W = np.asarray(W, dtype=float).reshape(len(labels), -1)
    n = len(labels)
    return StudyDataset(np.arange(1, n + 1), np.ones(n), np.ones(n), np.ones(n),
                        labels, np.zeros(n), W, num_causes=K)


def pattern_search(f, x0, h0=1.0, h_min=1e-8):
    """Maximize ``f`` by coordinate steps of shrinking size."""
    x = np.array(x0, dtype=float)
    fx = f(x)
    h = h0
    while h >= h_min:
        improved = True
        while improved:
            improved = False
            for j in range(len(x)):
                for s in (h, -h):
                    y = x.copy()
                    y[j] += s
                    fy = f(y)
                    if fy > fx:
                        x, fx, improved = y, fy, True
                        break
        h /= 2
    return x


def logistic_sample(seed, n=40, a=0.4, b=1.3):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=n)
    p1 = 1 / (1 + np.exp(-(a + b * W)))
    labels = np.where(rng.random(n) < p1, 1, 2)
    return W, labels


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_matches_brute_force_oracle(seed):
    W, labels = logistic_sample(seed)
    model = fit_multinomial(labeled(W, labels, 2))
    oracle = pattern_search(lambda c: multinomial_loglik(c, W, labels, 2), [0.0, 0.0])
    assert np.max(np.abs(model.coefficients.ravel() - oracle)) < 1e-4
    P_fit = model.probabilities(W)
    P_oracle = MultinomialModel(2, oracle.reshape(1, 2)).probabilities(W)
    assert np.max(np.abs(P_fit - P_oracle)) < 1e-4


def test_no_signal_recovers_frequencies():
    rng = np.random.default_rng(7)
    n1, n2 = 300, 200
    labels = np.array([1] * n1 + [2] * n2)
    # identical W distribution in both classes, symmetrized so the slope is exactly 0
    w = rng.normal(size=n1 // 2)
    W = np.concatenate([w, -w, w[:n2 // 2], -w[:n2 // 2]])
    model = fit_multinomial(labeled(W, labels, 2))
    intercept, slope = model.coefficients[0]
    assert abs(slope) < 1e-8
    assert intercept == pytest.approx(np.log(n1 / n2), abs=1e-8)
    assert np.allclose(model.probabilities(W), [n1 / 500, n2 / 500], atol=1e-8)


def test_three_classes_accuracy():
    rng = np.random.default_rng(11)
    n, gamma = 300, 3.5
    labels = np.repeat([1, 2, 3], n // 3)
    W = gamma * labels + rng.normal(size=n)
    model = fit_multinomial(labeled(W, labels, 3))
    acc = np.mean(np.argmax(model.probabilities(W), axis=1) + 1 == labels)
    # Bayes rule for equal priors and unit variances: cut points halfway between means
    bayes = np.mean(np.clip(np.round(W / gamma), 1, 3) == labels)
    assert acc >= 0.85
    assert abs(acc - bayes) < 0.03


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_score_vanishes_at_fit(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(1, 4, size=120)
    labels[:3] = [1, 2, 3]
    W = rng.normal(size=(120, 2)) + labels[:, None] * [0.8, -0.5]
    model = fit_multinomial(labeled(W, labels, 3))
    Z = np.column_stack([np.ones(120), W])
    Y = np.eye(3)[labels - 1]
    _, grad, _, _ = _loglik_grad_hess(model.coefficients, Z, Y, 0.0)
    assert np.max(np.abs(grad)) < 1e-6
    assert model.coefficients.shape == (2, 3)


def test_label_permutation_permutes_columns():
    rng = np.random.default_rng(5)
    labels = rng.integers(1, 4, size=150)
    W = rng.normal(size=150) + labels
    perm = np.array([3, 1, 2])          # old class c becomes perm[c - 1]
    a = fit_multinomial(labeled(W, labels, 3)).probabilities(W)
    b = fit_multinomial(labeled(W, perm[labels - 1], 3)).probabilities(W)
    assert np.allclose(b[:, perm - 1], a, atol=1e-8)


def test_zero_coefficients_give_uniform():
    model = MultinomialModel(3, np.zeros((2, 2)))
    P = model.probabilities(np.linspace(-5, 5, 7))
    assert np.allclose(P, 1 / 3)


@pytest.mark.parametrize("w", [1e3, 1e6, 1e300])
def test_saturation_is_finite(w):
    model = MultinomialModel(2, np.array([[0.0, 1e3]]))
    P = model.probabilities([w, -w])
    assert np.all(np.isfinite(P))
    assert np.allclose(P, [[1, 0], [0, 1]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3),
       st.lists(st.floats(-50, 50), min_size=2, max_size=2))
def test_softmax_rows_sum_to_one(coef, w):
    model = MultinomialModel(3, np.array([[coef[0], coef[1]], [coef[2], 0.0]]))
    P = model.probabilities(w)
    assert np.all(np.isfinite(P))
    assert np.all(np.abs(P.sum(axis=1) - 1) < 1e-12)


@pytest.mark.parametrize("row, label", [((0.2, 0.8), 2), ((0.5, 0.5), 1), ((0.3, 0.3, 0.4), 3),
                                        ((0.4, 0.4, 0.2), 1)])
def test_impute_argmax_and_ties(row, label):
    K = len(row)
    ds = StudyDataset([1], [1], [1.0], [1], [0], [0.0], num_causes=K)
    probs = EventProbabilityMatrix.for_dataset(ds, np.array([row]))
    assert impute_types(probs).tolist() == [label]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3), st.floats(0.01, 100))
def test_impute_invariant_to_scaling(scores, c):
    ds = StudyDataset([1], [1], [1.0], [1], [0], [0.0], num_causes=3)
    u = np.exp(np.array(scores))
    a = EventProbabilityMatrix.for_dataset(ds, (u / u.sum())[None])
    b = EventProbabilityMatrix.for_dataset(ds, (c * u / (c * u).sum())[None])
    assert impute_types(a).tolist() == impute_types(b).tolist()


def test_censored_units_get_no_row():
    ds = StudyDataset([1, 1, 2], [1, 2, 1], [1.0, 2.0, 3.0], [1, 0, 1], [1, 0, 2],
                      [0.0, 0.0, 0.0], [[0.0], [5.0], [1.0]], num_causes=2)
    model = MultinomialModel(2, np.array([[0.1, 0.2]]))
    probs = predict_probabilities(model, ds)
    assert probs.rows.tolist() == [0, 2]
    assert len(impute_types(probs)) == 2


def test_separation_detected_and_ridge_rescues():
    W = np.array([-2.0, -1.5, -1.0, 1.0, 1.5, 2.0])
    labels = np.array([1, 1, 1, 2, 2, 2])
    ds = labeled(W, labels, 2)
    with pytest.raises(SeparationError, match="ridge"):
        fit_multinomial(ds)
    model = fit_multinomial(ds, MultinomialConfig(ridge=0.1))
    assert np.all(np.isfinite(model.coefficients))
    assert model.probabilities([-2.0])[0, 0] > 0.5


def test_missing_class_and_predictors():
    with pytest.raises(DataValidationError, match="1 of K=2"):
        fit_multinomial(labeled([0.0, 1.0], [1, 1], 2))
    ds = StudyDataset([1, 2], [1, 1], [1.0, 1.0], [1, 1], [1, 2], [0.0, 0.0])
    with pytest.raises(DataValidationError, match="predictor"):
        fit_multinomial(ds)
    model = MultinomialModel(2, np.array([[0.0, 1.0]]))
    with pytest.raises(DataValidationError, match="predictor"):
        predict_probabilities(model, ds)


def test_json_round_trip(tmp_path):
    W, labels = logistic_sample(0)
    model = fit_multinomial(labeled(W, labels, 2))
    model.save(tmp_path / "m.json")
    back = MultinomialModel.load(tmp_path / "m.json")
    assert np.array_equal(back.coefficients, model.coefficients)
    assert back.training["n"] == 40
