import csv
import dataclasses
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crfrail.simulate import (SUMMARY_COLUMNS, ConfigError, ReplicateResult, SimulationConfig,
                              audit_columns, censoring_bound, config_from_mapping,
                              draw_event_times, generate_dataset, generate_replicate,
                              load_config, replicate_rng, run_replicate, run_replicates,
                              run_study, summarize)


def tiny(**kw):
    base = dict(num_clusters=40, training_size=30, replicates=3, seed=7)
    base.update(kw)
    return SimulationConfig(**base)


def test_zero_effects_give_rate_two_and_even_causes():
    cfg = SimulationConfig(beta_true=(0.0, 0.0), frailty_variance=1e-12)
    _, _, Te, cause = draw_event_times(cfg, np.random.default_rng(0), 50_000)
    assert abs(Te.mean() - 0.5) < 0.01
    assert abs(np.mean(cause == 1) - 0.5) < 0.01


def test_equal_rates_for_exposed_units():
    b = math.log(1.5)
    cfg = SimulationConfig(beta_true=(b, b), frailty_variance=1e-12)
    X, _, Te, cause = draw_event_times(cfg, np.random.default_rng(1), 100_000)
    exposed = X == 1
    assert abs(np.mean(cause[exposed] == 1) - 0.5) < 0.01
    assert abs(Te[exposed].mean() - 1.0 / 3.0) < 0.01


def test_frailty_covariance():
    cfg = SimulationConfig(frailty_variance=0.1, frailty_correlation=0.5)
    _, v, _, _ = draw_event_times(cfg, np.random.default_rng(2), 100_000)
    assert np.max(np.abs(np.cov(v.T) - [[0.1, 0.05], [0.05, 0.1]])) < 0.005


def test_cause_frequencies_match_integrated_probabilities():
    cfg = SimulationConfig(beta_true=(math.log(1.5), math.log(1.75)), frailty_variance=0.1,
                           frailty_correlation=0.2, censoring="none")
    ds = generate_dataset(cfg, np.random.default_rng(3), 50_000, hide_types=False)
    observed = np.mean(ds.event_type == 1)
    # oracle: average lambda_1 / (lambda_1 + lambda_2) over fresh X and v draws
    rng = np.random.default_rng(4)
    x = rng.binomial(1, 0.5, size=400_000)
    v = rng.multivariate_normal([0, 0], cfg.frailty_cov, size=400_000)
    l1 = np.exp(x * cfg.beta_true[0] + v[:, 0])
    l2 = np.exp(x * cfg.beta_true[1] + v[:, 1])
    assert abs(observed - np.mean(l1 / (l1 + l2))) < 0.006


@pytest.mark.parametrize("mechanism", ["uniform", "administrative"])
def test_censoring_calibration(mechanism):
    cfg = SimulationConfig(censoring=mechanism, seed=11)
    ds = generate_dataset(cfg, np.random.default_rng(5), 20_000, hide_types=False)
    assert abs(1.0 - ds.delta.mean() - 0.3) < 0.01
    assert censoring_bound(cfg) > 0


def test_fixed_censoring_parameter_and_none():
    assert censoring_bound(SimulationConfig(censoring_param=2.5)) == 2.5
    ds = generate_dataset(SimulationConfig(censoring="none"), np.random.default_rng(0), 50, False)
    assert ds.delta.all()


def test_predictors_follow_event_type():
    cfg = SimulationConfig(predictor_gap=3.0, predictor_mu0=1.0)
    ds = generate_dataset(cfg, np.random.default_rng(6), 20_000, hide_types=False)
    W = ds.predictors[:, 0]
    for t in range(3):
        assert abs(W[ds.event_type == t].mean() - (1.0 + 3.0 * t)) < 0.05
        assert abs(W[ds.event_type == t].var() - 1.0) < 0.05
    pairs = W.reshape(-1, 2) - 1.0 - 3.0 * ds.event_type.reshape(-1, 2)
    assert abs(np.corrcoef(pairs.T)[0, 1] - 0.25) < 0.03


def test_replicate_hides_types_only():
    cfg = tiny()
    main, training, truth = generate_replicate(cfg, replicate_rng(cfg.seed, 0))
    assert main.num_clusters == 40 and training.num_clusters == 30
    assert not np.any(main.event_type) and np.any(truth.event_type)
    assert np.array_equal(main.time, truth.time)
    assert np.array_equal(main.predictors, truth.predictors)
    assert np.array_equal(truth.event_type > 0, truth.delta == 1)


def test_replicate_streams_are_distinct_and_stable():
    a = replicate_rng(5, 0).random(4)
    assert np.array_equal(a, replicate_rng(5, 0).random(4))
    assert not np.array_equal(a, replicate_rng(5, 1).random(4))


@pytest.mark.parametrize("method", ["weighted", "imputed", "complete"])
def test_run_replicate(method):
    res = run_replicate(tiny(num_clusters=150, method=method), 0)
    assert res.converged, res.error
    assert res.beta.shape == (2,) and np.all(res.se > 0) and np.all(res.se_sandwich > 0)
    assert 0 < res.censored_fraction < 1


def test_serial_and_parallel_agree():
    cfg = tiny(replicates=4)
    a = run_study(cfg, jobs=1)
    b = run_study(cfg, jobs=2)
    assert a.summary_csv() == b.summary_csv()
    assert a.audit_csv() == b.audit_csv()


def test_summary_layout_and_metrics():
    cfg = tiny(num_clusters=100, replicates=4)
    s = run_study(cfg)
    rows = list(csv.DictReader(io.StringIO(s.summary_csv())))
    assert tuple(rows[0]) == SUMMARY_COLUMNS
    assert [r["parameter"] for r in rows] == ["beta1", "beta2"]
    B = np.array([r.beta for r in s.replicates if r.converged])
    r1 = s.row("beta1")
    assert r1["mean_estimate"] == pytest.approx(B[:, 0].mean())
    assert r1["ese"] == pytest.approx(B[:, 0].std(ddof=1))
    assert r1["percent_bias"] == pytest.approx(100 * (B[:, 0].mean() / cfg.beta_true[0] - 1))
    assert np.all((s.metric("coverage") >= 0) & (s.metric("coverage") <= 1))
    audit = list(csv.DictReader(io.StringIO(s.audit_csv())))
    assert len(audit) == 4 and tuple(audit[0]) == audit_columns(2)


def test_summary_counts_failures():
    cfg = tiny()
    ok = ReplicateResult(0, True, beta=np.array([0.4, 0.5]), se=np.array([0.1, 0.1]),
                         se_sandwich=np.array([0.1, 0.1]))
    ok2 = dataclasses.replace(ok, replicate=1, beta=np.array([0.2, 0.3]))
    bad = ReplicateResult(2, False, error="ConvergenceError: x")
    s = summarize(cfg, [ok, ok2, bad])
    assert s.num_converged == 2 and s.num_failed == 1
    assert s.row("beta1")["n_failed"] == 1
    assert s.row("beta1")["mean_estimate"] == pytest.approx(0.3)
    # 0.2 +- 1.96 * 0.1 misses log(1.5); both beta2 intervals cover it
    assert s.row("beta1")["coverage"] == pytest.approx(0.5)
    assert s.row("beta2")["coverage"] == pytest.approx(1.0)


def test_summary_without_converged_replicates():
    s = summarize(tiny(), [ReplicateResult(0, False, error="boom")])
    assert math.isnan(s.row("beta1")["mean_estimate"])
    assert s.converged_fraction == 0.0


def test_run_replicates_keeps_order():
    res = run_replicates(tiny(replicates=3), jobs=3)
    assert [r.replicate for r in res] == [0, 1, 2]


@pytest.mark.parametrize("bad", [
    dict(frailty_variance=0.0), dict(frailty_correlation=1.0), dict(frailty_correlation=-1.0),
    dict(predictor_gap=0.0), dict(replicates=0), dict(beta_true=(0.1,)),
    dict(method="bogus"), dict(censoring="interval"), dict(predictor_within_corr=1.0),
    dict(censoring_target=1.0), dict(censoring_param=-1.0), dict(training_size=0),
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigError):
        SimulationConfig(**bad)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 2.0), st.floats(-0.95, 0.95), st.floats(0.1, 5.0))
def test_valid_configs_accepted(s2, rho, gap):
    cfg = SimulationConfig(frailty_variance=s2, frailty_correlation=rho, predictor_gap=gap)
    assert np.min(np.linalg.eigvalsh(cfg.frailty_cov)) > 0


def test_load_config_yaml(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("num_clusters: 500\nhazard_ratios: [1.5, 1.75]\npredictor_gap: 2.5\n"
                 "name: small\n")
    cfg = load_config(p, seed=9)
    assert cfg.num_clusters == 500 and cfg.seed == 9 and cfg.name == "small"
    assert cfg.beta_true == pytest.approx((math.log(1.5), math.log(1.75)))


@pytest.mark.parametrize("text,match", [
    ("nope: 1\n", "unknown config keys"),
    ("- 1\n- 2\n", "mapping"),
    ("num_clusters: [1\n", "cannot read"),
    ("frailty_variance: -1\n", "frailty_variance"),
])
def test_load_config_errors(tmp_path, text, match):
    p = tmp_path / "bad.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(p)


def test_config_mapping_rejects_both_effect_forms():
    with pytest.raises(ConfigError, match="not both"):
        config_from_mapping({"beta_true": [0.1, 0.2], "hazard_ratios": [1.1, 1.2]})
