"""
Estimation of (beta, v, theta) in the cause-specific frailty model.

For fixed theta the penalized partial likelihood is maximized by Newton
steps on the joint (beta, v) system with ``H = I + blockdiag(0, D^{-1})``.
theta is then moved by a safeguarded Newton root-find on its estimating
function, re-maximizing (beta, v) at every trial value.

Two linear-algebra paths produce identical solutions: small problems use
dense Cholesky factors of H; large ones solve the v block by preconditioned
conjugate gradients using the O(n) risk-set operator, and only form the
dense v-block inverse once per theta evaluation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .data import StudyDataset
from .partial import PartialLikelihoodState, penalty
from .varcov import VarCovSpec

log = logging.getLogger(__name__)

THETA_SCORE_FORMS = ("direct", "laplace")
K2_SIGNS = ("negative", "positive")
VARIANCE_KINDS = ("hessian", "sandwich")


class SingularHessianError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    """The fit did not converge; ``fit`` holds the last iterate."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances, iteration caps and switches of the frailty solver.

    ``theta_score`` selects the trace term of the theta estimating function:
    ``'direct'`` uses ``tr(K2^{-1} dD)``, ``'laplace'`` the derivative of the
    Laplace-approximated marginal likelihood, ``tr(K2^{-1} D^{-1} dD D^{-1})``.
    ``k2_sign`` fixes ``K2 = -(I_vv + D^{-1})`` (``'negative'``) or its
    opposite.
    """

    inner_tol: float = 1e-7
    inner_max_iter: int = 50
    theta_tol: float = 1e-6
    theta_score_tol: float = 1e-5
    outer_max_iter: int = 60
    max_halvings: int = 30
    theta_score: str = "laplace"
    k2_sign: str = "negative"
    variance: str = "hessian"
    dense_threshold: int = 400
    ridge: float = 1e-10
    cg_tol: float = 1e-12
    cg_max_iter: int = 400
    estimate_theta: bool = True

    def __post_init__(self):
        if self.theta_score not in THETA_SCORE_FORMS:
            raise ValueError(f"theta_score must be one of {THETA_SCORE_FORMS}")
        if self.k2_sign not in K2_SIGNS:
            raise ValueError(f"k2_sign must be one of {K2_SIGNS}")
        if self.variance not in VARIANCE_KINDS:
            raise ValueError(f"variance must be one of {VARIANCE_KINDS}")


# -- linear algebra -------------------------------------------------------------

def _kron_blocks(Dinv, N):
    """Dense ``I_N kron D^{-1}`` in the v layout."""
    return np.kron(np.eye(N), Dinv)


def _add_blocks(M, Dinv, N):
    """Add ``I_N kron D^{-1}`` to the square matrix M in place."""
    K = len(Dinv)
    base = np.arange(N)[:, None, None] * K
    rows = base + np.arange(K)[None, :, None]
    cols = base + np.arange(K)[None, None, :]
    M[rows, cols] += Dinv[None]
    return M


def _cholesky(A, ridge):
    try:
        return sla.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    scale = max(1.0, float(np.max(np.abs(np.diag(A)))))
    try:
        return sla.cho_factor(A + ridge * scale * np.eye(len(A)), lower=True,
                              check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError(f"Hessian is singular even after a ridge of {ridge}") from exc


def _spd_inverse(A, ridge, with_logdet=False):
    """Inverse of an SPD matrix through its Cholesky factor.

    With ``with_logdet`` also returns ``log|A|``.
    """
    c, info = lapack.dpotrf(A, lower=1, clean=0)
    if info != 0:
        c, _ = _cholesky(A, ridge)
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    inv, info = lapack.dpotri(c, lower=1, overwrite_c=1)
    if info != 0:
        raise SingularHessianError("inversion from the Cholesky factor failed")
    inv = np.tril(inv)
    inv += np.tril(inv, -1).T
    return (inv, logdet) if with_logdet else inv


class HessianSystem:
    """Solves ``H x = r`` for the penalized (beta, v) Hessian at one state."""

    def __init__(self, state: PartialLikelihoodState, Dinv, options: SolverOptions):
        self.state = state
        self.Dinv = Dinv
        self.options = options
        K, p, N = state.dims
        self.K, self.p, self.N = K, p, N
        self.P = K * p
        self.dense = N * K <= options.dense_threshold
        self.Ib = state.info_beta()
        self.B = state.beta_v_dense()          # (Kp, NK)
        if self.dense:
            H = state.information()
            H[self.P:, self.P:] += _kron_blocks(Dinv, N)
            self._chol = _cholesky(H, options.ridge)
        else:
            self._d = state.vv_diag()
            blocks = np.einsum("ik,kl->ikl", self._d, np.eye(K)) + Dinv[None]
            self._precond = np.linalg.inv(blocks)
            self._schur = None

    # -- v block (structured path) -------------------------------------------
    def _cmatvec(self, X):
        """``(I_vv + D^{-1}) X`` for X of shape (N, K, m)."""
        return self.state.vv_matvec(X) + np.einsum("ikm,kl->ilm", X, self.Dinv)

    def _cg(self, Bmat):
        """Preconditioned CG on independent right-hand sides (N, K, m)."""
        X = np.zeros_like(Bmat)
        R = Bmat.copy()
        Z = np.einsum("ikl,ilm->ikm", self._precond, R)
        Pd = Z.copy()
        rz = np.einsum("ikm,ikm->m", R, Z)
        bnorm = np.sqrt(np.einsum("ikm,ikm->m", Bmat, Bmat))
        bnorm[bnorm == 0] = 1.0
        for it in range(self.options.cg_max_iter):
            rnorm = np.sqrt(np.einsum("ikm,ikm->m", R, R))
            if np.all(rnorm <= self.options.cg_tol * bnorm):
                return X
            Q = self._cmatvec(Pd)
            pq = np.einsum("ikm,ikm->m", Pd, Q)
            alpha = np.where(pq != 0, rz / np.where(pq != 0, pq, 1.0), 0.0)
            X += alpha * Pd
            R -= alpha * Q
            Z = np.einsum("ikl,ilm->ikm", self._precond, R)
            rz_new = np.einsum("ikm,ikm->m", R, Z)
            beta = np.where(rz != 0, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
            Pd = Z + beta * Pd
            rz = rz_new
        rnorm = np.sqrt(np.einsum("ikm,ikm->m", R, R))
        if np.all(rnorm <= 1e3 * self.options.cg_tol * bnorm):
            return X
        raise np.linalg.LinAlgError("conjugate gradients did not converge")

    def _schur_parts(self):
        if self._schur is None:
            K, p, N, P = self.K, self.p, self.N, self.P
            CinvB = self._cg(self.B.T.reshape(N, K, P))            # (N, K, P)
            S = np.zeros((P, P))
            for k in range(K):
                S[k * p:(k + 1) * p, k * p:(k + 1) * p] = self.Ib[k]
            S -= self.B @ CinvB.reshape(N * K, P)
            self._schur = (CinvB, _cholesky(S, self.options.ridge))
        return self._schur

    def solve(self, r_beta, r_v):
        """Solve for the Newton step; inputs (K, p) and (N, K)."""
        K, p, N, P = self.K, self.p, self.N, self.P
        if self.dense:
            x = sla.cho_solve(self._chol, np.concatenate([r_beta.ravel(), r_v.ravel()]),
                              check_finite=False)
            return x[:P].reshape(K, p), x[P:].reshape(N, K)
        try:
            CinvB, schur = self._schur_parts()
            y = self._cg(r_v.reshape(N, K, 1))[:, :, 0]
            xb = sla.cho_solve(schur, r_beta.ravel() - self.B @ y.ravel(), check_finite=False)
            xv = y - (CinvB.reshape(N * K, P) @ xb).reshape(N, K)
            return xb.reshape(K, p), xv
        except np.linalg.LinAlgError:
            log.debug("structured solve failed; falling back to dense factorization")
            self.dense = True
            H = self.state.information()
            H[P:, P:] += _kron_blocks(self.Dinv, N)
            self._chol = _cholesky(H, self.options.ridge)
            return self.solve(r_beta, r_v)


def vv_block_inverse(state: PartialLikelihoodState, Dinv, ridge=1e-10, with_logdet=False):
    """Dense ``(I_vv + D^{-1})^{-1}``, i.e. ``-K2^{-1}`` with the negative sign.

    With ``with_logdet`` also returns ``log|I_vv + D^{-1}|``.
    """
    N = state.dims[2]
    C = _add_blocks(state.vv_dense(), Dinv, N)
    try:
        return _spd_inverse(C, ridge, with_logdet)
    except SingularHessianError as exc:
        raise SingularHessianError(f"{exc}; the frailty covariance may belong at its floor "
                                   "(try a fixed small variance)") from exc


def _diag_blocks(T, N, K):
    return np.einsum("ikil->ikl", T.reshape(N, K, N, K))


# -- inner maximization -----------------------------------------------------------

@dataclass
class InnerResult:
    beta: np.ndarray
    v: np.ndarray
    state: PartialLikelihoodState
    ppll: float
    iterations: int
    converged: bool
    max_score_beta: float
    max_score_v: float
    degenerate: bool = False
    history: list = field(default_factory=list)


def _penalized_scores(state, Dinv):
    return state.score_beta(), state.score_v() - state.v @ Dinv


def inner_maximize(dataset: StudyDataset, weights, varcov: VarCovSpec, beta=None, v=None,
                   options: SolverOptions = SolverOptions()) -> InnerResult:
    """Maximize the weighted PPLL over (beta, v) with theta held fixed.

    Newton steps with step halving; stops once every score entry is below
    ``options.inner_tol`` in absolute value or after
    ``options.inner_max_iter`` iterations.
    """
    K, p, N = dataset.num_causes, dataset.covariate_dim, dataset.num_clusters
    beta = np.zeros((K, p)) if beta is None else np.array(beta, dtype=float).reshape(K, p)
    v = np.zeros((N, K)) if v is None else np.array(v, dtype=float).reshape(N, K)
    Dinv = np.linalg.inv(varcov.matrix())
    w = np.asarray(weights, dtype=float)

    if not np.any(w > 0):
        v = np.zeros((N, K))
        state = PartialLikelihoodState(dataset, w, beta, v)
        return InnerResult(beta, v, state, 0.0, 0, True, 0.0, 0.0, degenerate=True)

    state = PartialLikelihoodState(dataset, w, beta, v)
    ppll = state.loglik + penalty(v, varcov)
    history = [ppll]
    converged = False
    it = 0
    while True:
        gb, gv = _penalized_scores(state, Dinv)
        mb, mv = float(np.max(np.abs(gb))), float(np.max(np.abs(gv)))
        if max(mb, mv) < options.inner_tol:
            converged = True
            break
        if it >= options.inner_max_iter:
            break
        it += 1
        system = HessianSystem(state, Dinv, options)
        db, dv = system.solve(gb, gv)
        lam = 1.0
        accepted = False
        for _ in range(options.max_halvings):
            nb, nv = beta + lam * db, v + lam * dv
            try:
                cand = PartialLikelihoodState(dataset, w, nb, nv)
                cand_ppll = cand.loglik + penalty(nv, varcov)
            except FloatingPointError:
                cand_ppll = -math.inf
            if np.isfinite(cand_ppll) and cand_ppll >= ppll - 1e-13 * max(1.0, abs(ppll)):
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            log.debug("inner Newton: step halving exhausted at iteration %d", it)
            break
        beta, v, state, ppll = nb, nv, cand, cand_ppll
        history.append(ppll)
    return InnerResult(beta, v, state, ppll, it, converged, mb, mv, history=history)


# -- theta estimating function ---------------------------------------------------

def theta_score_terms(v, varcov: VarCovSpec, T_blocks, form="laplace", k2_sign="negative"):
    """Evaluate the theta estimating function given the blocks ``T_ii``.

    ``T_blocks`` has shape (N, K, K) and holds the diagonal blocks of
    ``(I_vv + D^{-1})^{-1}``; ``K2^{-1}`` is ``-T`` for the negative sign.
    Returns one value per theta component.
    """
    V = np.asarray(v, dtype=float).reshape(-1, varcov.num_causes)
    N = V.shape[0]
    D = varcov.matrix()
    Dinv = np.linalg.inv(D)
    sgn = -1.0 if k2_sign == "negative" else 1.0
    Tsum = T_blocks.sum(axis=0)
    out = []
    for Da in varcov.derivatives():
        Ma = Dinv @ Da @ Dinv
        G = Ma if form == "laplace" else Da
        tr1 = N * np.trace(Dinv @ Da)
        quad = float(np.sum((V @ Ma) * V))
        tr3 = sgn * float(np.sum(Tsum * G.T))
        out.append(-0.5 * (tr1 - quad + tr3))
    return np.array(out)


def theta_score(dataset, weights, beta, v, varcov: VarCovSpec, form="laplace",
                k2_sign="negative", K2_inverse=None) -> np.ndarray:
    """Theta estimating function at (beta, v).

    ``K2_inverse`` (dense NK x NK) may be supplied directly; otherwise it is
    computed as ``-(I_vv + D^{-1})^{-1}`` (flipped for ``k2_sign='positive'``).
    """
    K, N = varcov.num_causes, dataset.num_clusters
    if K2_inverse is None:
        state = PartialLikelihoodState(dataset, weights, beta, v)
        T = vv_block_inverse(state, np.linalg.inv(varcov.matrix()))
        return theta_score_terms(v, varcov, _diag_blocks(T, N, K), form, k2_sign)
    sgn = -1.0 if k2_sign == "negative" else 1.0
    T = sgn * np.asarray(K2_inverse, dtype=float)
    return theta_score_terms(v, varcov, _diag_blocks(T, N, K), form, k2_sign)


score_theta = theta_score


def laplace_objective(v, varcov: VarCovSpec, info_vv, pll: float = 0.0) -> float:
    """Computable part of the Laplace-approximated marginal log-likelihood.

    ``pll - 1/2 v'D^{-1}v - 1/2 log|D| - 1/2 log|I_vv + D^{-1}|`` with
    ``I_vv`` held fixed; its theta gradient is the 'laplace' score form.
    """
    V = np.asarray(v, dtype=float).reshape(-1, varcov.num_causes)
    N = V.shape[0]
    D = varcov.matrix()
    Dinv = np.linalg.inv(D)
    C = info_vv + _kron_blocks(Dinv, N)
    _, logdetC = np.linalg.slogdet(C)
    _, logdetD = np.linalg.slogdet(D)
    return pll + penalty(V, varcov) - 0.5 * N * logdetD - 0.5 * logdetC


def compare_theta_score_forms(dataset, weights, beta, v, varcov: VarCovSpec, h=1e-6):
    """Check both theta-score forms against finite differences of the
    Laplace objective (I_vv, beta and v fixed).

    Returns a dict with the finite-difference gradient, both analytic forms
    and their maximum absolute deviations.
    """
    state = PartialLikelihoodState(dataset, weights, beta, v)
    Ivv = state.vv_dense()
    theta = np.array(varcov.theta)
    fd = []
    for m in range(len(theta)):
        step = np.zeros_like(theta)
        step[m] = h * max(1.0, abs(theta[m]))
        up = laplace_objective(v, varcov.with_theta(theta + step), Ivv)
        dn = laplace_objective(v, varcov.with_theta(theta - step), Ivv)
        fd.append((up - dn) / (2 * step[m]))
    fd = np.array(fd)
    out = {"finite_difference": fd}
    for form in THETA_SCORE_FORMS:
        val = theta_score(dataset, weights, beta, v, varcov, form=form)
        out[form] = val
        out[f"{form}_max_abs_error"] = float(np.max(np.abs(val - fd)))
    return out


# -- fit ---------------------------------------------------------------------------

@dataclass
class _ThetaEval:
    varcov: VarCovSpec
    inner: InnerResult
    T: np.ndarray
    U: np.ndarray
    Dinv: np.ndarray
    objective: float

    @property
    def max_u(self):
        return float(np.max(np.abs(self.U))) if self.U.size else 0.0


def _evaluate_theta(dataset, w, varcov, beta0, v0, options) -> _ThetaEval:
    inner = inner_maximize(dataset, w, varcov, beta0, v0, options)
    Dinv = np.linalg.inv(varcov.matrix())
    K, N = varcov.num_causes, dataset.num_clusters
    T, logdet_c = vv_block_inverse(inner.state, Dinv, options.ridge, with_logdet=True)
    U = theta_score_terms(inner.v, varcov, _diag_blocks(T, N, K),
                          options.theta_score, options.k2_sign)
    _, logdet_d = np.linalg.slogdet(varcov.matrix())
    # Laplace-approximated marginal log partial likelihood
    objective = inner.ppll - 0.5 * N * logdet_d - 0.5 * logdet_c
    return _ThetaEval(varcov, inner, T, U, Dinv, objective)


def _theta_jacobian(ev: _ThetaEval, options: SolverOptions) -> np.ndarray:
    """Approximate dU/dtheta, holding I_vv fixed and using dv/dtheta = T M_b v."""
    vc = ev.varcov
    K = vc.num_causes
    V = ev.inner.v
    N = V.shape[0]
    Dinv, T = ev.Dinv, ev.T
    dD = vc.derivatives()
    d2D = vc.second_derivatives()
    P = len(dD)
    sgn = -1.0 if options.k2_sign == "negative" else 1.0
    M = [Dinv @ Da @ Dinv for Da in dD]
    G = M if options.theta_score == "laplace" else list(dD)
    Tr = T.reshape(N * K, N, K)
    TM = [(Tr @ Mb).reshape(N * K, N * K) for Mb in M]
    TG = TM if G is M else [(Tr @ Ga).reshape(N * K, N * K) for Ga in G]
    TGt = [np.ascontiguousarray(X.T) for X in TG]
    Tsum = _diag_blocks(T, N, K).sum(axis=0)
    flatv = V.ravel()
    dv = [(TM[b] @ flatv).reshape(N, K) for b in range(P)]
    J = np.zeros((P, P))
    for a in range(P):
        for b in range(P):
            t1 = N * (np.trace(Dinv @ d2D[a, b]) - np.trace(Dinv @ dD[b] @ Dinv @ dD[a]))
            dMa = -Dinv @ dD[b] @ M[a] - M[a] @ dD[b] @ Dinv + Dinv @ d2D[a, b] @ Dinv
            t2 = -(float(np.sum((V @ dMa) * V)) + 2.0 * float(np.sum((V @ M[a]) * dv[b])))
            dGa = dMa if options.theta_score == "laplace" else d2D[a, b]
            t3 = sgn * (float(np.vdot(TM[b], TGt[a])) + float(np.sum(Tsum * dGa.T)))
            J[a, b] = -0.5 * (t1 + t2 + t3)
    return J


class FrailtyFit:
    """Estimates, variances and diagnostics of a frailty-model fit.

    ``beta`` is (K, p); ``v`` is the flat NK vector with ``v_ik`` at
    ``K * i + k`` (zero-based). The full variance matrices are built on
    first access; the beta blocks are always available.
    """

    def __init__(self, *, beta, v, varcov, state, T, Dinv, ppll, converged,
                 outer_iterations, inner_iterations, theta_score, max_score_beta,
                 max_score_v, at_floor, options, warnings=(), degenerate=False):
        self.beta = beta
        self.v = v.ravel()
        self.theta = varcov
        self.pplog = ppll
        self.converged = converged
        self.iterations = {"outer": outer_iterations, "inner": inner_iterations}
        self.theta_score = theta_score
        self.max_score_beta = max_score_beta
        self.max_score_v = max_score_v
        self.at_floor = at_floor
        self.options = options
        self.warnings = list(warnings)
        self.degenerate = degenerate
        self._state = state
        self._T = T
        self._Dinv = Dinv
        K, p, N = state.dims
        self._dims = (K, p, N)
        self._compute_beta_blocks()

    def _compute_beta_blocks(self):
        K, p, N = self._dims
        P = K * p
        st = self._state
        Ib = st.info_beta()
        B = st.beta_v_dense()
        S = np.zeros((P, P))
        for k in range(K):
            S[k * p:(k + 1) * p, k * p:(k + 1) * p] = Ib[k]
        TB = self._T @ B.T
        S -= B @ TB
        S = 0.5 * (S + S.T)
        try:
            Sinv = np.linalg.inv(S)
        except np.linalg.LinAlgError:
            Sinv = np.full((P, P), np.nan)
        Z = TB @ Sinv                                   # -[H^{-1}]_{v beta}
        Zr = Z.reshape(N, K, P)
        DZ = np.einsum("ikm,kl->ilm", Zr, self._Dinv).reshape(N * K, P)
        self._Sinv = Sinv
        self._Z = Z
        self.beta_cov_hessian = 0.5 * (Sinv + Sinv.T)
        sand = Sinv - Z.T @ DZ
        self.beta_cov_sandwich = 0.5 * (sand + sand.T)

    @cached_property
    def variance_hessian(self) -> np.ndarray:
        """``H^{-1}`` over (beta, v) in the joint layout."""
        K, p, N = self._dims
        P = K * p
        Sinv, Z, T = self._Sinv, self._Z, self._T
        out = np.empty((P + N * K, P + N * K))
        out[:P, :P] = Sinv
        out[:P, P:] = -Z.T
        out[P:, :P] = -Z
        out[P:, P:] = T + Z @ np.linalg.solve(Sinv, Z.T) if P else T
        return 0.5 * (out + out.T)

    @cached_property
    def variance_sandwich(self) -> np.ndarray:
        """``H^{-1} I H^{-1}`` over (beta, v)."""
        K, p, N = self._dims
        P = K * p
        Hinv = self.variance_hessian
        Hv = Hinv[:, P:]
        DHv = (Hv.reshape(-1, N, K) @ self._Dinv).reshape(Hv.shape)
        out = Hinv - DHv @ Hv.T
        return 0.5 * (out + out.T)

    @property
    def information(self) -> np.ndarray:
        return self._state.information()

    def beta_cov(self, kind: Optional[str] = None) -> np.ndarray:
        kind = kind or self.options.variance
        return self.beta_cov_hessian if kind == "hessian" else self.beta_cov_sandwich

    def standard_errors(self, kind: Optional[str] = None) -> np.ndarray:
        K, p, _ = self._dims
        d = np.diag(self.beta_cov(kind))
        return np.sqrt(np.where(d >= 0, d, np.nan)).reshape(K, p)

    def confidence_intervals(self, kind: Optional[str] = None, z: float = 1.959963984540054):
        """Wald intervals ``beta +/- z * SE``; arrays of shape (K, p, 2)."""
        se = self.standard_errors(kind)
        return np.stack([self.beta - z * se, self.beta + z * se], axis=-1)

    def hazard_ratio_table(self, kind: Optional[str] = None) -> list:
        se = self.standard_errors(kind)
        ci = self.confidence_intervals(kind)
        rows = []
        K, p, _ = self._dims
        for k in range(K):
            for j in range(p):
                rows.append({
                    "cause": k + 1, "covariate": f"x{j + 1}",
                    "beta": float(self.beta[k, j]), "se": float(se[k, j]),
                    "hazard_ratio": float(np.exp(self.beta[k, j])),
                    "hr_lower": float(np.exp(ci[k, j, 0])),
                    "hr_upper": float(np.exp(ci[k, j, 1]))})
        return rows

    def to_record(self) -> dict:
        K, p, N = self._dims
        se_h = self.standard_errors("hessian")
        se_s = self.standard_errors("sandwich")
        ci = self.confidence_intervals()
        return {
            "num_causes": K, "covariate_dim": p, "num_clusters": N,
            "beta": self.beta.tolist(),
            "se_hessian": se_h.tolist(), "se_sandwich": se_s.tolist(),
            "default_variance": self.options.variance,
            "ci95": ci.tolist(),
            "theta": self.theta.describe(),
            "pplog": self.pplog,
            "converged": self.converged,
            "at_floor": self.at_floor,
            "warnings": self.warnings,
            "degenerate": self.degenerate,
            "iterations": self.iterations,
            "max_abs_score_beta": self.max_score_beta,
            "max_abs_score_v": self.max_score_v,
            "theta_score": [float(u) for u in np.atleast_1d(self.theta_score)],
            "theta_score_form": self.options.theta_score,
            "k2_sign": self.options.k2_sign,
        }


def _build_fit(dataset, ev: _ThetaEval, converged, outer, inner_total, options, at_floor,
               warnings=()):
    inner = ev.inner
    return FrailtyFit(beta=inner.beta, v=inner.v, varcov=ev.varcov, state=inner.state,
                      T=ev.T, Dinv=ev.Dinv, ppll=inner.ppll, converged=converged,
                      outer_iterations=outer, inner_iterations=inner_total,
                      theta_score=ev.U, max_score_beta=inner.max_score_beta,
                      max_score_v=inner.max_score_v, at_floor=at_floor, options=options,
                      warnings=warnings, degenerate=inner.degenerate)


def _limit_step(varcov: VarCovSpec, step, max_rho_step=0.5):
    """Shrink a theta step so correlation moves by at most ``max_rho_step``."""
    if varcov.structure == "exchangeable" and len(step) > 1:
        r = abs(step[1])
        if r > max_rho_step:
            step = step * (max_rho_step / r)
    return step


def fit(dataset: StudyDataset, weights, varcov: Optional[VarCovSpec] = None,
        options: SolverOptions = SolverOptions()) -> FrailtyFit:
    """Fit the cause-specific frailty model for the given weights.

    Raises
    ------
    ConvergenceError
        If theta or the inner Newton iterations fail to converge; the error
        carries the last iterate as ``.fit``.
    """
    K = dataset.num_causes
    if varcov is None:
        varcov = VarCovSpec.exchangeable(K, 0.1, 0.0)
    if varcov.num_causes != K:
        raise ValueError("covariance spec and dataset disagree on K")
    w = np.asarray(weights, dtype=float)

    cur = _evaluate_theta(dataset, w, varcov, None, None, options)
    inner_total = cur.inner.iterations
    evaluations = 1
    if cur.inner.degenerate or not options.estimate_theta:
        ok = cur.inner.converged
        fit_ = _build_fit(dataset, cur, ok, 0, inner_total, options, varcov.at_floor(),
                          ["degenerate: all weights are zero"] if cur.inner.degenerate else [])
        if not ok:
            raise ConvergenceError("inner Newton iterations did not converge", fit_)
        return fit_

    at_floor = False
    converged = False
    outer = 0
    laplace = options.theta_score == "laplace" and options.k2_sign == "negative"
    while outer < options.outer_max_iter:
        outer += 1
        theta = np.array(cur.varcov.theta)
        U = cur.U
        lo, hi = cur.varcov.bounds()
        # components held at a bound by an outward-pointing score
        tol = 1e-12 * np.maximum(1.0, np.abs(theta))
        frozen = ((theta <= lo + tol) & (U < 0)) | ((theta >= hi - tol) & (U > 0))
        if cur.varcov.structure == "exchangeable" and frozen[0]:
            # variance at the floor: the remaining components are not identified
            at_floor = True
            converged = cur.inner.converged
            break
        held = frozen & (theta <= lo + tol)
        P = cur.varcov.tangent_basis(frozen)
        Uf = P.T @ U
        if outer > 1 and change < options.theta_tol and cur.inner.converged and \
                (np.max(np.abs(Uf), initial=0.0) < options.theta_score_tol or change < 1e-13):
            converged = True
            break
        J = P.T @ _theta_jacobian(cur, options) @ P
        if laplace:
            # ascent direction: flip any non-negative curvature of the
            # (symmetrized) Jacobian
            evals, evecs = np.linalg.eigh(0.5 * (J + J.T))
            evals = -np.maximum(np.abs(evals), 1e-8 * max(1.0, np.max(np.abs(evals))))
            J = (evecs * evals) @ evecs.T
        try:
            Jinv = np.linalg.inv(J)
        except np.linalg.LinAlgError:
            Jinv = np.linalg.pinv(J)
        step = P @ (-Jinv @ Uf)
        if not np.all(np.isfinite(step)):
            step = np.zeros_like(theta)
        step = _limit_step(cur.varcov, step)
        merit = float(np.linalg.norm(Jinv @ Uf))

        lam = 1.0
        accepted = None
        for _ in range(options.max_halvings):
            trial_theta = cur.varcov.project(theta + lam * step)
            if held.any():
                # keep held components on their (possibly moving) lower bound
                trial_theta[held] = cur.varcov.with_theta(trial_theta).bounds()[0][held]
            trial_vc = cur.varcov.with_theta(trial_theta)
            trial = _evaluate_theta(dataset, w, trial_vc, cur.inner.beta, cur.inner.v, options)
            inner_total += trial.inner.iterations
            evaluations += 1
            trial_merit = float(np.linalg.norm(Jinv @ (P.T @ trial.U)))
            ascent = laplace and trial.objective >= cur.objective + \
                1e-4 * float(U @ (np.array(trial_theta) - theta))
            if trial.inner.converged and (trial_merit < merit or trial_merit < 1e-12 or ascent):
                accepted = trial
                break
            lam *= 0.5
        if accepted is None:
            # halving exhausted: keep the smallest trial if it is usable
            if trial.inner.converged:
                accepted = trial
            else:
                break
        change = float(np.max(np.abs(np.array(accepted.varcov.theta) - theta)))
        cur = accepted
        log.debug("theta step %d: theta=%s U=%s lambda=%g", outer, cur.varcov.theta, cur.U, lam)

    warnings = []
    if at_floor:
        warnings.append("frailty variance at floor")
    fit_ = _build_fit(dataset, cur, converged, outer, inner_total, options,
                      at_floor or cur.varcov.at_floor(), warnings)
    fit_.iterations["theta_evaluations"] = evaluations
    if not converged:
        raise ConvergenceError(
            f"theta iteration did not converge after {outer} steps "
            f"(max |U(theta)| = {cur.max_u:.3g})", fit_)
    return fit_


def sandwich_variance(H, info):
    """Return ``(H^{-1} I H^{-1}, H^{-1})`` for dense H and information I."""
    H = np.asarray(H, dtype=float)
    c = _cholesky(0.5 * (H + H.T), 0.0)
    Hinv = sla.cho_solve(c, np.eye(len(H)), check_finite=False)
    Hinv = 0.5 * (Hinv + Hinv.T)
    V = Hinv @ np.asarray(info, dtype=float) @ Hinv
    return 0.5 * (V + V.T), Hinv


def penalized_hessian(info, varcov: VarCovSpec, num_beta: int) -> np.ndarray:
    """``H = I + blockdiag(0, D^{-1})`` from a dense information matrix."""
    H = np.array(info, dtype=float)
    N = (len(H) - num_beta) // varcov.num_causes
    H[num_beta:, num_beta:] += _kron_blocks(np.linalg.inv(varcov.matrix()), N)
    return H
