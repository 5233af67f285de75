"""
Monte Carlo harness for clustered competing-risks data with hidden event types.

Each cluster has ``units_per_cluster`` units with a binary exposure
``X ~ Bernoulli(0.5)`` and cause-specific hazards
``lambda_k = exp(X beta_k + v_ik)`` (unit baseline). The frailties
``v_i`` are multivariate normal with variance ``sigma2`` and correlation
``rho``. Censoring is independent. A scalar predictor ``W`` of the event
type is drawn per unit with mean ``mu0 + gamma * delta`` and within-cluster
correlation ``predictor_within_corr``.

Replicate ``r`` draws from ``SeedSequence(seed, spawn_key=(r,))`` so its
output does not depend on how replicates are scheduled.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .classify import MultinomialConfig, SeparationError, fit_multinomial, impute_types, \
    predict_probabilities
from .data import DataValidationError, StudyDataset, effective_weights
from .solver import ConvergenceError, SolverOptions, fit
from .varcov import VarCovSpec

log = logging.getLogger(__name__)

METHODS = ("weighted", "imputed", "complete")
CENSORING = ("uniform", "administrative", "none")
# spawn key reserved for the censoring calibration stream
_CALIBRATION_KEY = 2**32 - 1
_CALIBRATION_UNITS = 200_000
Z95 = 1.959963984540054


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    """One simulation scenario.

    ``censoring_param`` is ``c_max`` for uniform censoring and the fixed
    follow-up time for administrative censoring; ``None`` calibrates it so
    that about ``censoring_target`` of the units are censored.
    ``training_size`` counts clusters.
    """

    num_clusters: int = 1000
    units_per_cluster: int = 2
    num_causes: int = 2
    beta_true: tuple = (math.log(1.5), math.log(1.5))
    frailty_variance: float = 0.1
    frailty_correlation: float = 0.5
    predictor_gap: float = 3.5
    predictor_mu0: float = 0.0
    predictor_within_corr: float = 0.25
    training_size: int = 100
    replicates: int = 200
    seed: int = 20240607
    censoring: str = "uniform"
    censoring_param: Optional[float] = None
    censoring_target: float = 0.3
    method: str = "weighted"
    varcov: str = "exchangeable"
    classifier_ridge: float = 0.0
    fallback_ridge: float = 0.1
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, "beta_true", tuple(float(b) for b in np.ravel(self.beta_true)))
        self.validate()

    def validate(self):
        K = self.num_causes
        if K < 1 or self.units_per_cluster < 1 or self.num_clusters < 1:
            raise ConfigError("num_causes, units_per_cluster and num_clusters must be >= 1")
        if len(self.beta_true) != K:
            raise ConfigError(f"beta_true needs {K} entries, got {len(self.beta_true)}")
        if not self.frailty_variance > 0:
            raise ConfigError("frailty_variance must be > 0")
        lo = -1.0 / (K - 1) if K > 1 else -1.0
        if not (lo < self.frailty_correlation < 1 and abs(self.frailty_correlation) < 1):
            raise ConfigError(f"frailty_correlation must lie in ({lo:g}, 1)")
        if not abs(self.predictor_within_corr) < 1:
            raise ConfigError("predictor_within_corr must satisfy |corr| < 1")
        if not self.predictor_gap > 0:
            raise ConfigError("predictor_gap must be > 0")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.training_size < 1:
            raise ConfigError("training_size must be >= 1")
        if self.censoring not in CENSORING:
            raise ConfigError(f"censoring must be one of {CENSORING}")
        if self.censoring_param is not None and not self.censoring_param > 0:
            raise ConfigError("censoring_param must be > 0")
        if self.censoring != "none" and not 0 < self.censoring_target < 1:
            raise ConfigError("censoring_target must lie in (0, 1)")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.varcov not in ("exchangeable", "unstructured"):
            raise ConfigError("varcov must be 'exchangeable' or 'unstructured'")
        if self.classifier_ridge < 0 or self.fallback_ridge < 0:
            raise ConfigError("ridge penalties must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    @property
    def frailty_cov(self) -> np.ndarray:
        K, r = self.num_causes, self.frailty_correlation
        return self.frailty_variance * ((1 - r) * np.eye(K) + r * np.ones((K, K)))

    @property
    def predictor_cov(self) -> np.ndarray:
        m, r = self.units_per_cluster, self.predictor_within_corr
        return (1 - r) * np.eye(m) + r * np.ones((m, m))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta_true"] = list(self.beta_true)
        return d


def load_config(path, **overrides) -> SimulationConfig:
    """Read a scenario from a YAML (or JSON) mapping of config fields.

    ``hazard_ratios`` may be given instead of ``beta_true``.
    """
    import yaml

    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping of key: value pairs")
    return config_from_mapping(raw, **overrides)


def config_from_mapping(raw: dict, **overrides) -> SimulationConfig:
    raw = dict(raw)
    if "hazard_ratios" in raw:
        if "beta_true" in raw:
            raise ConfigError("give either beta_true or hazard_ratios, not both")
        try:
            raw["beta_true"] = [math.log(float(h)) for h in raw.pop("hazard_ratios")]
        except (TypeError, ValueError) as exc:
            raise ConfigError("hazard_ratios must be a list of positive numbers") from exc
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name: f for f in fields(SimulationConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return SimulationConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# -- data generation --------------------------------------------------------------

def draw_event_times(config: SimulationConfig, rng, N):
    """Exposure, frailties, latent event times and causes for N clusters."""
    m, K = config.units_per_cluster, config.num_causes
    X = rng.binomial(1, 0.5, size=(N, m)).astype(float)
    v = rng.multivariate_normal(np.zeros(K), config.frailty_cov, size=N, method="cholesky")
    rates = np.exp(X[:, :, None] * np.array(config.beta_true) + v[:, None, :])   # (N, m, K)
    total = rates.sum(axis=2)
    Te = rng.exponential(1.0 / total)
    u = rng.random((N, m))
    cum = np.cumsum(rates / total[:, :, None], axis=2)
    cause = 1 + np.sum(u[:, :, None] > cum[:, :, :-1], axis=2)
    return X, v, Te, cause


def _censoring_fraction(c, Te, mechanism):
    if mechanism == "uniform":
        return float(np.mean(np.minimum(Te, c)) / c)
    return float(np.mean(Te > c))


@lru_cache(maxsize=64)
def censoring_bound(config: SimulationConfig) -> float:
    """``c_max`` (uniform) or follow-up time (administrative) for the scenario.

    Calibrated on a fixed stream by root finding of the censored fraction,
    which is monotone in the bound.
    """
    if config.censoring == "none":
        return math.inf
    if config.censoring_param is not None:
        return float(config.censoring_param)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed,
                                                       spawn_key=(_CALIBRATION_KEY,)))
    n = max(1, _CALIBRATION_UNITS // config.units_per_cluster)
    _, _, Te, _ = draw_event_times(config, rng, n)
    Te = Te.ravel()
    target = config.censoring_target
    f = lambda c: _censoring_fraction(c, Te, config.censoring) - target  # noqa: E731
    hi = float(np.max(Te))
    lo = float(np.min(Te[Te > 0]))
    c = brentq(f, lo, hi * 4, xtol=1e-12, rtol=1e-12)
    log.info("calibrated %s censoring bound %.6g for target %.2f", config.censoring, c, target)
    return float(c)


def generate_dataset(config: SimulationConfig, rng, num_clusters: int,
                     hide_types: bool) -> StudyDataset:
    """One study of ``num_clusters`` clusters drawn from the scenario."""
    N, m = num_clusters, config.units_per_cluster
    X, _, Te, cause = draw_event_times(config, rng, N)
    bound = censoring_bound(config)
    if config.censoring == "uniform":
        C = rng.uniform(0.0, bound, size=(N, m))
    else:
        C = np.full((N, m), bound)
    T = np.minimum(Te, C)
    delta = (Te <= C).astype(np.int64)
    dtype = cause * delta
    noise = rng.multivariate_normal(np.zeros(m), config.predictor_cov, size=N, method="cholesky")
    W = config.predictor_mu0 + config.predictor_gap * dtype + noise
    cluster = np.repeat(np.arange(1, N + 1), m)
    unit = np.tile(np.arange(1, m + 1), N)
    event_type = np.zeros_like(dtype) if hide_types else dtype
    return StudyDataset(cluster, unit, T.ravel(), delta.ravel(), event_type.ravel(),
                        X.reshape(-1, 1), W.reshape(-1, 1), num_causes=config.num_causes)


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))


def generate_replicate(config: SimulationConfig, rng):
    """Return ``(main, training, main_truth)``.

    ``main`` has its event types hidden; ``main_truth`` is the same study
    with types kept (for the complete-data estimator); ``training`` keeps
    its types.
    """
    truth = generate_dataset(config, rng, config.num_clusters, hide_types=False)
    training = generate_dataset(config, rng, config.training_size, hide_types=False)
    return truth.mask_event_types(), training, truth


# -- one replicate ---------------------------------------------------------------

@dataclass
class ReplicateResult:
    replicate: int
    converged: bool
    beta: Optional[np.ndarray] = None
    se: Optional[np.ndarray] = None
    se_sandwich: Optional[np.ndarray] = None
    theta: tuple = ()
    at_floor: bool = False
    classifier_fallback: bool = False
    censored_fraction: float = float("nan")
    iterations: int = 0
    error: str = ""


def _classifier_weights(config, main, training):
    fallback = False
    try:
        model = fit_multinomial(training, MultinomialConfig(ridge=config.classifier_ridge))
    except SeparationError:
        if config.fallback_ridge <= 0:
            raise
        fallback = True
        model = fit_multinomial(training, MultinomialConfig(ridge=config.fallback_ridge))
    probs = predict_probabilities(model, main)
    if config.method == "weighted":
        return effective_weights(main, "weighted", probs=probs), fallback
    return effective_weights(main, "imputed", imputed=impute_types(probs)), fallback


def run_replicate(config: SimulationConfig, replicate: int,
                  options: SolverOptions = SolverOptions()) -> ReplicateResult:
    rng = replicate_rng(config.seed, replicate)
    main, training, truth = generate_replicate(config, rng)
    res = ReplicateResult(replicate, False,
                          censored_fraction=float(1.0 - np.mean(main.delta)))
    try:
        if config.method == "complete":
            w = effective_weights(truth, "complete")
        else:
            w, res.classifier_fallback = _classifier_weights(config, main, training)
        K = config.num_causes
        vc = VarCovSpec.exchangeable(K) if config.varcov == "exchangeable" \
            else VarCovSpec.unstructured(K)
        f = fit(main, w, vc, options)
    except (ConvergenceError, SeparationError, DataValidationError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        res.error = f"{type(exc).__name__}: {exc}"
        return res
    res.converged = True
    res.beta = f.beta[:, 0].copy()
    res.se = f.standard_errors()[:, 0]
    res.se_sandwich = f.standard_errors("sandwich")[:, 0]
    res.theta = tuple(f.theta.theta)
    res.at_floor = f.at_floor
    res.iterations = f.iterations["outer"]
    return res


def _run_chunk(args):
    config, replicates, options = args
    return [run_replicate(config, r, options) for r in replicates]


def run_replicates(config: SimulationConfig, jobs: int = 1,
                   options: SolverOptions = SolverOptions()) -> list:
    """All replicates in index order; ``jobs`` worker processes."""
    reps = list(range(config.replicates))
    censoring_bound(config)
    if jobs <= 1 or len(reps) <= 1:
        return [run_replicate(config, r, options) for r in reps]
    chunks = [reps[i::jobs] for i in range(jobs)]
    chunks = [c for c in chunks if c]
    out = {}
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        for chunk in pool.map(_run_chunk, [(config, c, options) for c in chunks]):
            for res in chunk:
                out[res.replicate] = res
    return [out[r] for r in reps]


# -- summaries -----------------------------------------------------------------

@dataclass
class MonteCarloSummary:
    """Per-parameter percent bias, empirical SE and coverage.

    Computed over converged replicates only; ``replicates`` keeps every
    replicate-level result for audit.
    """

    config: SimulationConfig
    rows: list
    replicates: list = field(repr=False)
    num_converged: int = 0
    num_failed: int = 0
    num_fallback: int = 0
    censoring_bound: float = float("nan")

    @property
    def converged_fraction(self) -> float:
        return self.num_converged / max(1, len(self.replicates))

    def row(self, parameter: str) -> dict:
        for r in self.rows:
            if r["parameter"] == parameter:
                return r
        raise KeyError(parameter)

    def metric(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def summary_csv(self) -> str:
        return _to_csv(SUMMARY_COLUMNS, self.rows)

    def audit_csv(self) -> str:
        return _to_csv(audit_columns(self.config.num_causes), audit_rows(self.replicates))


SUMMARY_COLUMNS = ("scenario", "method", "parameter", "true_value", "mean_estimate",
                   "percent_bias", "ese", "mean_se", "coverage", "n_converged",
                   "n_failed", "n_classifier_fallback", "censoring_bound")


def summarize(config: SimulationConfig, results: Sequence[ReplicateResult]) -> MonteCarloSummary:
    ok = [r for r in results if r.converged]
    n_fb = sum(r.classifier_fallback for r in results)
    bound = censoring_bound(config)
    rows = []
    K = config.num_causes
    B = np.array([r.beta for r in ok]).reshape(len(ok), K)
    S = np.array([r.se for r in ok]).reshape(len(ok), K)
    for k in range(K):
        truth = config.beta_true[k]
        if ok:
            mean = float(np.mean(B[:, k]))
            ese = float(np.std(B[:, k], ddof=1)) if len(ok) > 1 else float("nan")
            lo, hi = B[:, k] - Z95 * S[:, k], B[:, k] + Z95 * S[:, k]
            cover = float(np.mean((lo <= truth) & (truth <= hi)))
            mse = float(np.mean(S[:, k]))
        else:
            mean = ese = cover = mse = float("nan")
        bias = 100.0 * (mean - truth) / truth if truth != 0 else float("nan")
        rows.append({"scenario": config.name, "method": config.method,
                     "parameter": f"beta{k + 1}", "true_value": truth,
                     "mean_estimate": mean, "percent_bias": bias, "ese": ese,
                     "mean_se": mse, "coverage": cover, "n_converged": len(ok),
                     "n_failed": len(results) - len(ok), "n_classifier_fallback": n_fb,
                     "censoring_bound": bound})
    return MonteCarloSummary(config, rows, list(results), len(ok), len(results) - len(ok),
                             n_fb, bound)


def run_study(config: SimulationConfig, jobs: int = 1,
              options: SolverOptions = SolverOptions()) -> MonteCarloSummary:
    """Run every replicate of ``config`` and aggregate the metrics."""
    return summarize(config, run_replicates(config, jobs, options))


def audit_columns(K: int) -> tuple:
    cols = ["replicate", "converged"]
    cols += [f"beta{k + 1}_hat" for k in range(K)]
    cols += [f"se{k + 1}" for k in range(K)]
    cols += [f"se{k + 1}_sandwich" for k in range(K)]
    cols += ["theta", "at_floor", "classifier_fallback", "censored_fraction",
             "outer_iterations", "error"]
    return tuple(cols)


def audit_rows(results) -> list:
    rows = []
    for r in results:
        row = {"replicate": r.replicate, "converged": int(r.converged),
               "theta": " ".join(repr(float(t)) for t in r.theta),
               "at_floor": int(r.at_floor), "classifier_fallback": int(r.classifier_fallback),
               "censored_fraction": r.censored_fraction, "outer_iterations": r.iterations,
               "error": r.error}
        if r.beta is not None:
            for k, b in enumerate(r.beta):
                row[f"beta{k + 1}_hat"] = float(b)
                row[f"se{k + 1}"] = float(r.se[k])
                row[f"se{k + 1}_sandwich"] = float(r.se_sandwich[k])
        rows.append(row)
    return rows


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _to_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c, "")) for c in columns])
    return buf.getvalue()
