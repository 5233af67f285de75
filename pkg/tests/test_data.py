import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crfrail.data import (DataValidationError, EventProbabilityMatrix, Schema, StudyDataset,
                          SurvivalUnit, effective_weights, load_dataset, read_labels,
                          read_probabilities, risk_set_indicator, write_dataset, write_labels,
                          write_probabilities)

from conftest import make_dataset, random_probabilities

HEADER = "cluster_id,unit_id,time,delta,event_type,x1,w1\n"


def write(tmp_path, body, header=HEADER, name="d.csv"):
    path = tmp_path / name
    path.write_text(header + body, encoding="utf-8")
    return path


def test_load_two_by_two(tmp_path):
    path = write(tmp_path, "1,1,1.5,1,2,0,0.3\n1,2,2.0,0,,1,0.1\n"
                           "2,1,0.7,1,1,1,-1\n2,2,3.1,1,,0,2\n")
    ds = load_dataset(path, Schema(num_causes=2))
    assert ds.num_clusters == 2
    assert ds.cluster_sizes.tolist() == [2, 2]
    assert ds.num_causes == 2
    # unknown event type for an observed event is parsed as absent
    assert ds.event_type.tolist() == [2, 0, 1, 0]
    assert ds.predictor_dim == 1


def test_canonical_order(tmp_path):
    path = write(tmp_path, "2,2,1,1,1,0,0\n1,2,1,1,1,0,0\n2,1,1,1,2,0,0\n1,1,1,0,,0,0\n")
    ds = load_dataset(path)
    assert ds.cluster_id.tolist() == [1, 1, 2, 2]
    assert ds.unit_id.tolist() == [1, 2, 1, 2]
    assert ds.event_type.tolist() == [0, 1, 2, 1]


@pytest.mark.parametrize("body, message", [
    ("1,1,1.0,0,1,0,0\n", "event type present for censored unit at row 2"),
    ("1,1,1.0,1,1,0\n", "row 2: expected 7 fields"),
    ("1,1,abc,1,1,0,0\n", "row 2: non-numeric"),
    ("1,1,1.0,1,1,0,0\n1,2,-1.0,1,1,0,0\n", "row 3: time must be positive"),
    ("1,1,1.0,2,1,0,0\n", "row 2: delta must be 0 or 1"),
    ("1,1,1.0,1,1,0,nan\n", "row 2: non-finite"),
    ("1,1,1.0,1,3,0,0\n", "row 2: event_type 3 exceeds K=2"),
])
def test_malformed_rows_name_the_row(tmp_path, body, message):
    path = write(tmp_path, body)
    with pytest.raises(DataValidationError, match=message):
        load_dataset(path, Schema(num_causes=2))


def test_missing_cluster_ids_listed(tmp_path):
    path = write(tmp_path, "1,1,1.0,1,1,0,0\n3,1,2.0,1,2,0,0\n")
    with pytest.raises(DataValidationError, match=r"missing cluster ids: \[2\]"):
        load_dataset(path)


def test_empty_file(tmp_path):
    path = write(tmp_path, "", header="")
    with pytest.raises(DataValidationError, match="empty"):
        load_dataset(path)
    path = write(tmp_path, "", name="h.csv")
    with pytest.raises(DataValidationError, match="no data rows"):
        load_dataset(path)


def test_bad_header(tmp_path):
    path = write(tmp_path, "1,1,1.0,1,1,0\n", header="cluster,unit,time,delta,event_type,x1\n")
    with pytest.raises(DataValidationError, match="row 1"):
        load_dataset(path)
    path = write(tmp_path, "1,1,1.0,1,1,0\n", header="cluster_id,unit_id,time,delta,event_type,x1\n",
                 name="x.csv")
    with pytest.raises(DataValidationError, match="expected 2 covariate"):
        load_dataset(path, Schema(covariate_dim=2))


def test_duplicate_units_rejected():
    with pytest.raises(DataValidationError, match="duplicate"):
        StudyDataset([1, 1], [1, 1], [1.0, 2.0], [1, 1], [1, 1], [0.0, 1.0])


def test_causes_cannot_be_inferred_without_events():
    with pytest.raises(DataValidationError, match="cannot be inferred"):
        StudyDataset([1], [1], [1.0], [0], [0], [0.0])
    ds = StudyDataset([1], [1], [1.0], [0], [0], [0.0], num_causes=2)
    assert ds.num_causes == 2


@pytest.mark.parametrize("seed", range(5))
def test_round_trip(tmp_path, seed):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng, N=6, m=3, K=3, p=2, q=2, unequal=True)
    path = tmp_path / "rt.csv"
    write_dataset(ds, path)
    back = load_dataset(path, Schema(num_causes=3))
    assert back == ds
    write_dataset(back, tmp_path / "rt2.csv")
    assert (tmp_path / "rt2.csv").read_bytes() == path.read_bytes()


def test_units_round_trip(rng):
    ds = make_dataset(rng, N=3, m=2)
    assert StudyDataset.from_units(ds.units(), num_causes=2) == ds
    u = ds.units()[0]
    assert isinstance(u, SurvivalUnit)
    assert (u.event_type is None) == (ds.event_type[0] == 0)


@pytest.mark.parametrize("T, t, expected", [(2.0, 1.5, 1), (1.0, 1.0, 1), (0.5, 1.5, 0)])
def test_risk_set_indicator(T, t, expected):
    ds = StudyDataset([1], [1], [T], [1], [1], [0.0])
    assert risk_set_indicator(ds, 1, 1, t) == expected


@given(st.floats(0.01, 10), st.lists(st.floats(0.01, 20), min_size=2, max_size=10))
def test_risk_set_indicator_non_increasing(T, ts):
    ds = StudyDataset([1], [1], [T], [1], [1], [0.0])
    vals = [risk_set_indicator(ds, 1, 1, t) for t in sorted(ts)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_effective_weights_examples():
    ds = StudyDataset([1, 1, 2], [1, 2, 1], [1.0, 2.0, 3.0], [1, 0, 1], [2, 0, 1],
                      [0.0, 1.0, 0.0], num_causes=2)
    assert effective_weights(ds, "complete").tolist() == [[0, 1], [0, 0], [1, 0]]
    probs = EventProbabilityMatrix.for_dataset(ds, [[0.3, 0.7], [0.9, 0.1]])
    assert effective_weights(ds, "weighted", probs=probs).tolist() == \
        [[0.3, 0.7], [0, 0], [0.9, 0.1]]
    assert effective_weights(ds, "imputed", imputed=[1, 2]).tolist() == \
        [[1, 0], [0, 0], [0, 1]]


def test_effective_weights_errors(rng):
    ds = make_dataset(rng).mask_event_types()
    with pytest.raises(DataValidationError, match="complete mode needs event types"):
        effective_weights(ds, "complete")
    with pytest.raises(DataValidationError, match="requires an event probability"):
        effective_weights(ds, "weighted")
    with pytest.raises(DataValidationError, match="requires imputed"):
        effective_weights(ds, "imputed")
    with pytest.raises(DataValidationError, match="exactly the units"):
        effective_weights(ds, "imputed", imputed=[1])
    with pytest.raises(ValueError, match="unknown weight mode"):
        effective_weights(ds, "bogus")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["complete", "weighted", "imputed"]))
def test_weights_sum_to_delta(seed, mode):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng, N=5, m=3, K=3, unequal=True)
    probs = random_probabilities(rng, ds)
    labels = rng.integers(1, 4, size=len(ds.event_rows))
    w = effective_weights(ds, mode, probs=probs, imputed=labels)
    tol = 1e-10 if mode == "weighted" else 0.0
    assert np.all(np.abs(w.sum(axis=1) - ds.delta) <= tol)
    assert np.all(w[ds.delta == 0] == 0)


def test_probability_matrix_invariants(rng):
    ds = make_dataset(rng, N=3)
    n = len(ds.event_rows)
    with pytest.raises(DataValidationError, match="sum to 1"):
        EventProbabilityMatrix.for_dataset(ds, np.full((n, 2), 0.4))
    with pytest.raises(DataValidationError, match=r"\[0, 1\]"):
        EventProbabilityMatrix.for_dataset(ds, np.tile([1.5, -0.5], (n, 1)))


def test_probability_and_label_files(tmp_path, rng):
    ds = make_dataset(rng, N=5, K=3)
    probs = random_probabilities(rng, ds)
    write_probabilities(probs, tmp_path / "p.csv")
    back = read_probabilities(tmp_path / "p.csv", ds)
    assert np.array_equal(back.probs, probs.probs)
    labels = np.arange(len(ds.event_rows)) % 3 + 1
    write_labels(ds, labels, tmp_path / "l.csv")
    assert np.array_equal(read_labels(tmp_path / "l.csv", ds), labels)


def test_mask_and_relabel(rng):
    ds = make_dataset(rng, N=4)
    masked = ds.mask_event_types()
    assert np.all(masked.event_type == 0)
    assert np.array_equal(masked.delta, ds.delta)
    perm = [3, 1, 4, 2]
    moved = ds.relabel_clusters(perm)
    for c in range(1, 5):
        a = ds.time[ds.cluster_id == c]
        b = moved.time[moved.cluster_id == perm[c - 1]]
        assert np.array_equal(a, b)
