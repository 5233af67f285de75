"""
Weighted penalized partial likelihood of the cause-specific frailty model,
its scores and the (unpenalized) information matrix.

Risk sets follow ``Y(t) = I(T >= t)``; tied times share one denominator
(Breslow). Every risk-set sum is evaluated with cumulative sums over units
sorted by time, so a full evaluation costs O(n log n) plus O(n p^2).

Parameter layout: ``beta`` is (K, p) with row ``k`` holding cause ``k + 1``;
``v`` is (N, K) so that the flat vector ``v.ravel()`` places ``v_ik`` at
position ``K * i + k``. The joint (beta, v) vector is
``[beta_1, ..., beta_K, v]``.
"""
from __future__ import annotations

import numpy as np

from .data import StudyDataset
from .varcov import VarCovSpec


_TINY = 1e-150


class EmptyRiskSetError(FloatingPointError):
    """A weighted event has a numerically empty risk set."""


class RiskSetIndex:
    """Sort order and tie groups of a dataset, computed once and cached."""

    def __init__(self, dataset: StudyDataset):
        t = dataset.time
        self.order = np.argsort(t, kind="stable")
        ts = t[self.order]
        self.first = np.searchsorted(ts, ts, side="left")
        self.last = np.searchsorted(ts, ts, side="right") - 1
        self.cluster = dataset.cluster_index
        self.starts = dataset.cluster_starts
        self.X = dataset.covariates
        self.Xs = self.X[self.order]
        self.N = dataset.num_clusters
        self.K = dataset.num_causes
        self.p = dataset.covariate_dim
        self.n = dataset.num_units
        # cluster index of each sorted unit
        self.cluster_s = self.cluster[self.order]
        self.sizes = dataset.cluster_sizes
        self.equal_sizes = bool(np.all(self.sizes == self.sizes[0]))


def risk_index(dataset: StudyDataset) -> RiskSetIndex:
    idx = dataset.__dict__.get("_risk_index")
    if idx is None:
        idx = RiskSetIndex(dataset)
        dataset.__dict__["_risk_index"] = idx
    return idx


def _revcumsum(a):
    return np.cumsum(a[::-1], axis=0)[::-1]


def as_beta(beta, K, p) -> np.ndarray:
    return np.asarray(beta, dtype=float).reshape(K, p)


def as_v(v, N, K) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape(N, K)


class CauseTerms:
    """Risk-set quantities of one cause at fixed (beta_k, v_k).

    Arrays are in canonical unit order. ``e`` is ``exp(eta - shift)``; the
    cumulative quantities ``H``, ``C2`` and ``G`` carry the matching
    ``exp(shift)`` powers so that products with ``e`` are scale free.
    """

    def __init__(self, idx: RiskSetIndex, w, beta_k, v_k):
        eta = idx.X @ beta_k + v_k[idx.cluster]
        shift = float(eta.max())
        e = np.exp(eta - shift)
        o = idx.order
        es = e[o]
        S0 = np.cumsum(es[::-1])[::-1][idx.first]
        ws = w[o]
        events = ws > 0
        # sums below _TINY would overflow the squared-denominator terms
        if np.any(S0[events] < _TINY) or not np.all(np.isfinite(S0)):
            raise EmptyRiskSetError("empty risk set at a weighted event time")
        S1 = _revcumsum(es[:, None] * idx.Xs)[idx.first]
        safe = np.where(S0 > 0, S0, 1.0)
        xbar_s = S1 / safe[:, None]
        logS0 = np.log(safe) + shift
        self.loglik = float(np.sum(ws[events] * (eta[o][events] - logS0[events])))
        h = ws / safe
        Hs = np.cumsum(h)[idx.last]
        C2s = np.cumsum(h / safe)[idx.last]
        Gs = np.cumsum(h[:, None] * xbar_s, axis=0)[idx.last]

        inv = np.empty_like(o)
        inv[o] = np.arange(len(o))
        self.e = e
        self.w = w
        self.H = Hs[inv]
        self.C2 = C2s[inv]
        self.G = Gs[inv]
        self.xbar_events = xbar_s[events]
        self.w_events = ws[events]
        self._idx = idx
        self._h = h
        self._c2inc = h / safe

    def score_beta(self):
        X = self._idx.X
        return X.T @ (self.w - self.e * self.H)

    def score_v(self):
        return np.add.reduceat(self.w - self.e * self.H, self._idx.starts)

    def info_beta(self):
        X = self._idx.X
        eH = self.e * self.H
        second = (X * eH[:, None]).T @ X
        xb = self.xbar_events
        return second - (xb * self.w_events[:, None]).T @ xb

    def info_beta_v(self):
        """Cross block (p, N)."""
        idx = self._idx
        contrib = self.e[:, None] * (idx.X * self.H[:, None] - self.G)
        return np.add.reduceat(contrib, idx.starts, axis=0).T

    def vv_diag_part(self):
        return np.add.reduceat(self.e * self.H, self._idx.starts)

    def vv_lowrank_diag(self):
        """Diagonal of the subtracted part ``sum_a w_a a_a a_a'``."""
        idx = self._idx
        e, C2 = self.e, self.C2
        if idx.equal_sizes:
            m = idx.sizes[0]
            E = e.reshape(-1, m)
            C = C2.reshape(-1, m)
            return np.einsum("ia,ib,iab->i", E, E,
                             np.minimum(C[:, :, None], C[:, None, :]))
        out = np.zeros(idx.N)
        for i, (s, m) in enumerate(zip(idx.starts, idx.sizes)):
            ee, cc = e[s:s + m], C2[s:s + m]
            out[i] = ee @ np.minimum.outer(cc, cc) @ ee
        return out

    def vv_lowrank_matvec(self, x):
        """Apply ``sum_a w_a a_a a_a'`` to ``x`` of shape (N,) or (N, m)."""
        idx = self._idx
        tail = (1,) * (x.ndim - 1)
        es = self.e[idx.order].reshape((-1,) + tail)
        ex = es * x[idx.cluster_s]
        rx = np.cumsum(ex[::-1], axis=0)[::-1][idx.first]
        acc = np.cumsum(self._c2inc.reshape((-1,) + tail) * rx, axis=0)[idx.last]
        contrib = np.empty_like(acc)
        contrib[idx.order] = es * acc
        return np.add.reduceat(contrib, idx.starts, axis=0)

    def vv_dense(self):
        """The N x N block ``diag(d) - sum_a w_a a_a a_a'``."""
        idx = self._idx
        if idx.equal_sizes:
            m = idx.sizes[0]
            E = self.e.reshape(-1, m)
            C = self.C2.reshape(-1, m)
            Q = np.zeros((idx.N, idx.N))
            for a in range(m):
                for b in range(m):
                    Q -= np.minimum.outer(C[:, a], C[:, b]) * np.outer(E[:, a], E[:, b])
            Q[np.diag_indices_from(Q)] += self.vv_diag_part()
            return Q
        Q = np.minimum.outer(self.C2, self.C2)
        Q *= self.e[:, None]
        Q *= self.e[None, :]
        Q = np.add.reduceat(np.add.reduceat(Q, idx.starts, axis=0), idx.starts, axis=1)
        Q *= -1.0
        Q[np.diag_indices_from(Q)] += self.vv_diag_part()
        return Q


class PartialLikelihoodState:
    """All risk-set quantities at one (beta, v) for every cause."""

    def __init__(self, dataset: StudyDataset, weights, beta, v):
        self.idx = idx = risk_index(dataset)
        K, p, N = idx.K, idx.p, idx.N
        w = np.asarray(weights, dtype=float)
        if w.shape != (idx.n, K):
            raise ValueError(f"weights must have shape ({idx.n}, {K})")
        self.beta = as_beta(beta, K, p)
        self.v = as_v(v, N, K)
        self.terms = [CauseTerms(idx, w[:, k], self.beta[k], self.v[:, k]) for k in range(K)]
        self.loglik = float(sum(t.loglik for t in self.terms))

    @property
    def dims(self):
        return self.idx.K, self.idx.p, self.idx.N

    def score_beta(self) -> np.ndarray:
        return np.stack([t.score_beta() for t in self.terms])

    def score_v(self) -> np.ndarray:
        """Unpenalized v score, shape (N, K)."""
        return np.column_stack([t.score_v() for t in self.terms])

    def info_beta(self) -> np.ndarray:
        return np.stack([t.info_beta() for t in self.terms])

    def info_beta_v(self) -> np.ndarray:
        """Shape (K, p, N): cause k's beta against v[:, k]."""
        return np.stack([t.info_beta_v() for t in self.terms])

    def vv_diag(self) -> np.ndarray:
        """Diagonal of I_vv arranged (N, K)."""
        return np.column_stack([t.vv_diag_part() - t.vv_lowrank_diag() for t in self.terms])

    def vv_matvec(self, x) -> np.ndarray:
        """I_vv applied to ``x`` of shape (N, K) or (N, K, m)."""
        out = np.empty_like(x, dtype=float)
        for k, t in enumerate(self.terms):
            xk = x[:, k]
            d = t.vv_diag_part()
            dk = d if xk.ndim == 1 else d[:, None]
            out[:, k] = dk * xk - t.vv_lowrank_matvec(xk)
        return out

    def vv_dense(self) -> np.ndarray:
        K, p, N = self.dims
        M = np.zeros((N * K, N * K))
        for k, t in enumerate(self.terms):
            M[k::K, k::K] = t.vv_dense()
        return M

    def beta_v_dense(self) -> np.ndarray:
        """I_beta,v as a (K p, N K) matrix in the joint layout."""
        K, p, N = self.dims
        B = np.zeros((K * p, N * K))
        cross = self.info_beta_v()
        for k in range(K):
            B[k * p:(k + 1) * p, k::K] = cross[k]
        return B

    def information(self) -> np.ndarray:
        """Dense information matrix of the unpenalized weighted partial likelihood."""
        K, p, N = self.dims
        P = K * p
        I = np.zeros((P + N * K, P + N * K))
        Ib = self.info_beta()
        for k in range(K):
            I[k * p:(k + 1) * p, k * p:(k + 1) * p] = Ib[k]
        B = self.beta_v_dense()
        I[:P, P:] = B
        I[P:, :P] = B.T
        I[P:, P:] = self.vv_dense()
        return I


def penalty_inverse(varcov: VarCovSpec) -> np.ndarray:
    return np.linalg.inv(varcov.matrix())


def penalty(v, varcov: VarCovSpec) -> float:
    """``-1/2 v' D^{-1} v`` using the block-diagonal structure of D."""
    V = np.asarray(v, dtype=float).reshape(-1, varcov.num_causes)
    return -0.5 * float(np.sum((V @ penalty_inverse(varcov)) * V))


def weighted_ppll(dataset: StudyDataset, weights, beta, v, varcov: VarCovSpec) -> float:
    """Weighted penalized partial log-likelihood."""
    state = PartialLikelihoodState(dataset, weights, beta, v)
    return state.loglik + penalty(v, varcov)


def weighted_pll(dataset: StudyDataset, weights, beta, v) -> float:
    """Weighted partial log-likelihood without the frailty penalty."""
    return PartialLikelihoodState(dataset, weights, beta, v).loglik


def score_beta(dataset: StudyDataset, weights, beta, v, cause: int) -> np.ndarray:
    """Estimating function for ``beta_k``; ``cause`` is 1-based."""
    state = PartialLikelihoodState(dataset, weights, beta, v)
    return state.terms[cause - 1].score_beta()


def score_v(dataset: StudyDataset, weights, beta, v, varcov: VarCovSpec) -> np.ndarray:
    """Estimating function for v as a flat NK vector."""
    state = PartialLikelihoodState(dataset, weights, beta, v)
    V = state.v
    return (state.score_v() - V @ penalty_inverse(varcov)).ravel()


def information_matrix(dataset: StudyDataset, weights, beta, v) -> np.ndarray:
    """Information matrix of the unpenalized weighted partial likelihood.

    Rows and columns follow the joint layout ``[beta_1..beta_K, v]``.
    """
    return PartialLikelihoodState(dataset, weights, beta, v).information()
