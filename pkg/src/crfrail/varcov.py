"""Parameterizations of the per-cluster frailty covariance ``D_i(theta)``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

VARIANCE_FLOOR = 1e-8
RHO_BOUND = 0.999
# L_ii^2 >= ratio * sum_j<i L_ij^2 keeps every implied correlation within RHO_BOUND
_COND_RATIO = (1.0 - RHO_BOUND ** 2) / RHO_BOUND ** 2

STRUCTURES = ("exchangeable", "unstructured")


@dataclass(frozen=True)
class VarCovSpec:
    """Frailty covariance family and its current parameter vector.

    ``exchangeable``: ``theta = (sigma2, rho)`` with
    ``D_i = sigma2 * ((1 - rho) I + rho 11')`` (just ``(sigma2,)`` when K = 1).

    ``unstructured``: ``D_i = L L'`` where ``L`` is lower triangular and
    ``theta`` lists its entries row by row, diagonal entries on the log scale.
    Each diagonal entry is bounded below so that variances stay above the
    floor and correlations stay within ``RHO_BOUND`` in absolute value.
    """

    structure: str
    num_causes: int
    theta: Tuple[float, ...]

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown covariance structure {self.structure!r}")
        theta = tuple(float(t) for t in np.ravel(self.theta))
        if len(theta) != self.num_params:
            raise ValueError(f"{self.structure} with K={self.num_causes} needs "
                             f"{self.num_params} parameters, got {len(theta)}")
        object.__setattr__(self, "theta", theta)
        if not self.is_admissible():
            raise ValueError(f"inadmissible covariance parameters {theta}")

    @classmethod
    def exchangeable(cls, num_causes: int, sigma2: float = 0.1, rho: float = 0.0):
        theta = (sigma2,) if num_causes == 1 else (sigma2, rho)
        return cls("exchangeable", num_causes, theta)

    @classmethod
    def unstructured(cls, num_causes: int, cov=None):
        """Unstructured family initialized from ``cov`` (default ``0.1 * I``)."""
        cov = 0.1 * np.eye(num_causes) if cov is None else np.asarray(cov, dtype=float)
        L = np.linalg.cholesky(cov)
        theta = []
        for i in range(num_causes):
            for j in range(i + 1):
                theta.append(np.log(L[i, i]) if i == j else L[i, j])
        return cls("unstructured", num_causes, tuple(theta))

    @property
    def num_params(self) -> int:
        K = self.num_causes
        if self.structure == "exchangeable":
            return 1 if K == 1 else 2
        return K * (K + 1) // 2

    @property
    def param_names(self) -> Tuple[str, ...]:
        if self.structure == "exchangeable":
            return ("sigma2",) if self.num_causes == 1 else ("sigma2", "rho")
        return tuple(f"L{i + 1}{j + 1}" for i in range(self.num_causes) for j in range(i + 1))

    def with_theta(self, theta) -> "VarCovSpec":
        return VarCovSpec(self.structure, self.num_causes, tuple(np.ravel(theta)))

    # -- admissibility ----------------------------------------------------
    def _rho_lower(self) -> float:
        K = self.num_causes
        return max(-RHO_BOUND, -1.0 / (K - 1) + 1e-3) if K > 1 else -RHO_BOUND

    def is_admissible(self) -> bool:
        if not all(np.isfinite(self.theta)):
            return False
        if self.structure == "exchangeable":
            if self.theta[0] < VARIANCE_FLOOR * (1 - 1e-12):
                return False
            if self.num_causes > 1:
                rho = self.theta[1]
                return self._rho_lower() - 1e-12 <= rho <= RHO_BOUND + 1e-12
            return True
        return True

    def project(self, theta) -> np.ndarray:
        """Nearest admissible parameter vector (box projection)."""
        theta = np.array(theta, dtype=float)
        if self.structure == "exchangeable":
            theta[0] = max(theta[0], VARIANCE_FLOOR)
            if self.num_causes > 1:
                theta[1] = min(max(theta[1], self._rho_lower()), RHO_BOUND)
        else:
            lo = self._log_diag_lower(theta)
            theta = np.maximum(theta, lo)
        return theta

    def _log_diag_lower(self, theta) -> np.ndarray:
        """Lower limits of the unstructured parameters (-inf off the diagonal)."""
        lo = np.full(len(theta), -np.inf)
        offdiag = 0.0
        for m, (i, j) in enumerate(self._tri_index()):
            if i == j:
                lo[m] = 0.5 * np.log(max(VARIANCE_FLOOR, _COND_RATIO * offdiag))
                offdiag = 0.0
            else:
                offdiag += theta[m] ** 2
        return lo

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Lower and upper limits of each theta component."""
        P = self.num_params
        lo, hi = np.full(P, -np.inf), np.full(P, np.inf)
        if self.structure == "exchangeable":
            lo[0] = VARIANCE_FLOOR
            if self.num_causes > 1:
                lo[1], hi[1] = self._rho_lower(), RHO_BOUND
        else:
            lo = self._log_diag_lower(np.array(self.theta))
        return lo, hi

    def tangent_basis(self, frozen) -> np.ndarray:
        """Columns spanning the feasible moves when ``frozen`` components sit at
        their lower bounds.

        A frozen unstructured diagonal held by the correlation limit follows
        the off-diagonal entries of its row so that the limit stays active.
        """
        frozen = np.asarray(frozen, dtype=bool)
        free = np.flatnonzero(~frozen)
        B = np.zeros((self.num_params, len(free)))
        B[free, np.arange(len(free))] = 1.0
        if self.structure != "unstructured":
            return B
        th = np.array(self.theta)
        idx = self._tri_index()
        for m, (i, j) in enumerate(idx):
            if i != j or not frozen[m]:
                continue
            row = [n for n, (a, b) in enumerate(idx) if a == i and b < i]
            s = float(np.sum(th[row] ** 2))
            if _COND_RATIO * s <= VARIANCE_FLOOR:
                continue
            for c, n in enumerate(free):
                if n in row:
                    B[m, c] = th[n] / s
        return B

    def at_floor(self) -> bool:
        """True when a frailty variance sits at the lower bound."""
        if self.structure == "exchangeable":
            return self.theta[0] <= VARIANCE_FLOOR * (1 + 1e-9)
        return bool(np.min(np.diag(self.matrix())) <= VARIANCE_FLOOR * (1 + 1e-6))

    # -- matrices ---------------------------------------------------------
    def _tri_index(self):
        return [(i, j) for i in range(self.num_causes) for j in range(i + 1)]

    def _chol(self) -> np.ndarray:
        K = self.num_causes
        L = np.zeros((K, K))
        for m, (i, j) in enumerate(self._tri_index()):
            L[i, j] = np.exp(self.theta[m]) if i == j else self.theta[m]
        return L

    def matrix(self) -> np.ndarray:
        """The K x K block ``D_i(theta)``."""
        K = self.num_causes
        if self.structure == "exchangeable":
            s2 = self.theta[0]
            rho = self.theta[1] if K > 1 else 0.0
            return s2 * ((1.0 - rho) * np.eye(K) + rho * np.ones((K, K)))
        L = self._chol()
        return L @ L.T

    def derivatives(self) -> np.ndarray:
        """``dD_i / dtheta_m`` stacked as an array of shape (m, K, K)."""
        K = self.num_causes
        if self.structure == "exchangeable":
            J, I = np.ones((K, K)), np.eye(K)
            if K == 1:
                return np.ones((1, 1, 1))
            s2, rho = self.theta
            return np.stack([(1.0 - rho) * I + rho * J, s2 * (J - I)])
        L = self._chol()
        out = []
        for m, (i, j) in enumerate(self._tri_index()):
            E = np.zeros((K, K))
            E[i, j] = L[i, j] if i == j else 1.0
            out.append(E @ L.T + L @ E.T)
        return np.stack(out)

    def second_derivatives(self) -> np.ndarray:
        """``d2D_i / dtheta_m dtheta_n`` with shape (m, n, K, K)."""
        K, P = self.num_causes, self.num_params
        out = np.zeros((P, P, K, K))
        if self.structure == "exchangeable":
            if K > 1:
                out[0, 1] = out[1, 0] = np.ones((K, K)) - np.eye(K)
            return out
        L = self._chol()
        idx = self._tri_index()
        Es = []
        for (i, j) in idx:
            E = np.zeros((K, K))
            E[i, j] = L[i, j] if i == j else 1.0
            Es.append(E)
        for m, (i, j) in enumerate(idx):
            for n in range(P):
                val = Es[m] @ Es[n].T + Es[n] @ Es[m].T
                if m == n and i == j:
                    val = val + Es[m] @ L.T + L @ Es[m].T
                out[m, n] = val
        return out

    def describe(self) -> dict:
        D = self.matrix()
        out = {"structure": self.structure, "theta": dict(zip(self.param_names, self.theta)),
               "matrix": D.tolist()}
        if self.structure == "exchangeable":
            out["sigma2"] = self.theta[0]
            if self.num_causes > 1:
                out["rho"] = self.theta[1]
        return out
