"""Multinomial logistic classifier for event types given predictors W."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.special import log_softmax, logsumexp

from .data import DataValidationError, EventProbabilityMatrix, StudyDataset


class SeparationError(RuntimeError):
    """Raised when the training classes are (quasi-)completely separated."""


class EventTypeClassifier(Protocol):
    """Anything that turns a dataset into event-type probabilities."""

    def predict_probabilities(self, dataset: StudyDataset) -> EventProbabilityMatrix:
        ...


@dataclass(frozen=True)
class MultinomialConfig:
    max_iter: int = 100
    score_tol: float = 1e-8
    loglik_rtol: float = 1e-10
    ridge: float = 0.0
    coef_bound: float = 1e3


@dataclass(frozen=True)
class MultinomialModel:
    """Reference-class multinomial logit; the last class (K) is the baseline.

    ``coefficients[k]`` holds ``(intercept, slope_1, ..., slope_q)`` for class
    ``k + 1``.
    """

    num_classes: int
    coefficients: np.ndarray
    training: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float)
        if coef.ndim != 2 or coef.shape[0] != self.num_classes - 1:
            raise ValueError(
                f"coefficients must have shape ({self.num_classes - 1}, q + 1)")
        if not np.all(np.isfinite(coef)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coefficients", coef)

    @property
    def predictor_dim(self) -> int:
        return self.coefficients.shape[1] - 1

    def class_scores(self, W) -> np.ndarray:
        W = np.asarray(W, dtype=float).reshape(-1, self.predictor_dim)
        Z = np.column_stack([np.ones(len(W)), W])
        return np.column_stack([Z @ self.coefficients.T, np.zeros(len(W))])

    def probabilities(self, W) -> np.ndarray:
        """Softmax of the class scores, stabilized through log-sum-exp."""
        P = np.exp(log_softmax(self.class_scores(W), axis=1))
        return P / P.sum(axis=1, keepdims=True)

    def predict_probabilities(self, dataset: StudyDataset) -> EventProbabilityMatrix:
        return predict_probabilities(self, dataset)

    def to_json(self) -> str:
        record = {
            "model": "multinomial_logit",
            "num_classes": self.num_classes,
            "predictor_dim": self.predictor_dim,
            "reference_class": self.num_classes,
            "coefficients_row_major": [float(x) for x in self.coefficients.ravel()],
            "coefficient_layout": "rows = classes 1..K-1, columns = intercept, w1..wq",
            "training": self.training,
        }
        return json.dumps(record, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MultinomialModel":
        rec = json.loads(text)
        K, q = rec["num_classes"], rec["predictor_dim"]
        coef = np.array(rec["coefficients_row_major"], dtype=float).reshape(K - 1, q + 1)
        return cls(num_classes=K, coefficients=coef, training=rec.get("training", {}))

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MultinomialModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _loglik_grad_hess(beta, Z, Y, ridge):
    """Penalized log-likelihood, gradient and Hessian in the flat parameter.

    ``beta`` is ``(K-1, q+1)``; the intercept column is not penalized.
    """
    Km1, d = beta.shape
    S = np.column_stack([Z @ beta.T, np.zeros(len(Z))])
    logP = log_softmax(S, axis=1)
    P = np.exp(logP)
    ll = float(np.sum(Y * logP))
    R = (Y - P)[:, :Km1]
    grad = (R.T @ Z)
    Pm = P[:, :Km1]
    # -d2ll = sum_n (diag(p) - p p^T) kron z z^T
    H = np.zeros((Km1, d, Km1, d))
    for a in range(Km1):
        for b in range(a, Km1):
            wab = Pm[:, a] * ((a == b) - Pm[:, b])
            blk = (Z * wab[:, None]).T @ Z
            H[a, :, b, :] = blk
            H[b, :, a, :] = blk.T
    H = H.reshape(Km1 * d, Km1 * d)
    if ridge > 0:
        pen = beta.copy()
        pen[:, 0] = 0.0
        ll -= 0.5 * ridge * float(np.sum(pen ** 2))
        grad = grad - ridge * pen
        mask = np.ones((Km1, d))
        mask[:, 0] = 0.0
        H = H + ridge * np.diag(mask.ravel())
    return ll, grad.ravel(), H, P


def fit_multinomial(training: StudyDataset,
                    config: MultinomialConfig = MultinomialConfig()) -> MultinomialModel:
    """Fit the classifier on training units with an observed event (delta = 1).

    Newton iterations with step halving maximize the (optionally ridge
    penalized) multinomial log-likelihood.

    Raises
    ------
    DataValidationError
        If event units lack predictors or event types, or fewer than K
        classes are observed.
    SeparationError
        If the classes are separated so the likelihood has no finite
        maximizer; refit with ``ridge > 0``.
    """
    rows = training.event_rows
    if training.predictors is None:
        raise DataValidationError("training dataset has no predictor columns (w1..wq)")
    K = training.num_causes
    labels = training.event_type[rows]
    if np.any(labels == 0):
        raise DataValidationError("every training unit with delta = 1 needs an event type")
    present = np.unique(labels)
    if present.size < K:
        raise DataValidationError(
            f"training data contain {present.size} of K={K} event types; all are required")
    W = training.predictors[rows]
    return _fit_arrays(W, labels, K, config)


def _fit_arrays(W, labels, K, config: MultinomialConfig) -> MultinomialModel:
    W = np.asarray(W, dtype=float).reshape(len(labels), -1)
    n, q = W.shape
    Z = np.column_stack([np.ones(n), W])
    Y = np.zeros((n, K))
    Y[np.arange(n), np.asarray(labels) - 1] = 1.0
    beta = np.zeros((K - 1, q + 1))
    # start intercepts at the log frequency ratios against the reference class
    freq = Y.mean(axis=0)
    beta[:, 0] = np.log(freq[:-1] / freq[-1])

    ll, grad, H, P = _loglik_grad_hess(beta, Z, Y, config.ridge)
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        if np.max(np.abs(grad)) < config.score_tol:
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        lam = 1.0
        while True:
            cand = beta + lam * step.reshape(beta.shape)
            ll_new, g_new, H_new, P_new = _loglik_grad_hess(cand, Z, Y, config.ridge)
            if ll_new >= ll - 1e-12 * abs(ll) or lam < 1e-10:
                break
            lam *= 0.5
        rel = abs(ll_new - ll) / max(abs(ll), 1e-300)
        beta, ll, grad, H, P = cand, ll_new, g_new, H_new, P_new
        if np.max(np.abs(beta)) > config.coef_bound:
            break
        if np.max(np.abs(grad)) < config.score_tol or rel < config.loglik_rtol:
            converged = True
            break

    perfect = np.all(np.abs(Y - P) < 1e-6)
    if np.max(np.abs(beta)) > config.coef_bound or (config.ridge == 0 and perfect):
        raise SeparationError(
            "event-type classes are separated by the predictors (coefficients "
            "diverge); refit with a ridge penalty, e.g. MultinomialConfig(ridge=0.1)")
    if not converged and config.ridge == 0 and np.max(np.abs(grad)) > 1e-6:
        raise SeparationError(
            "multinomial fit did not converge; the classes may be quasi-separated. "
            "Refit with a ridge penalty")
    training = {"n": int(n), "iterations": int(it), "converged": bool(converged),
                "loglik": float(ll), "max_abs_score": float(np.max(np.abs(grad))),
                "ridge": float(config.ridge)}
    return MultinomialModel(num_classes=K, coefficients=beta, training=training)


def predict_probabilities(model: MultinomialModel, main: StudyDataset) -> EventProbabilityMatrix:
    """Event-type probabilities for every unit of ``main`` with delta = 1."""
    rows = main.event_rows
    if main.predictors is None:
        raise DataValidationError("main dataset has no predictor columns (w1..wq)")
    if main.predictor_dim != model.predictor_dim:
        raise DataValidationError(
            f"predictor dimension mismatch: model q={model.predictor_dim}, "
            f"data q={main.predictor_dim}")
    if main.num_causes != model.num_classes:
        raise DataValidationError(
            f"model has {model.num_classes} classes, dataset K={main.num_causes}")
    probs = model.probabilities(main.predictors[rows]) if rows.size else \
        np.zeros((0, model.num_classes))
    return EventProbabilityMatrix.for_dataset(main, probs)


def impute_types(probs: EventProbabilityMatrix) -> np.ndarray:
    """Most probable event type (1-based) per row; ties go to the lowest index."""
    return np.argmax(probs.probs, axis=1).astype(np.int64) + 1


def multinomial_loglik(coefficients, W, labels, K) -> float:
    """Plain multinomial log-likelihood, used by diagnostics and tests."""
    coefficients = np.asarray(coefficients, dtype=float).reshape(K - 1, -1)
    W = np.asarray(W, dtype=float).reshape(len(labels), -1)
    Z = np.column_stack([np.ones(len(W)), W])
    S = np.column_stack([Z @ coefficients.T, np.zeros(len(W))])
    idx = np.asarray(labels) - 1
    return float(np.sum(S[np.arange(len(W)), idx] - logsumexp(S, axis=1)))
