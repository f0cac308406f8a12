import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfa.data import (
    Dataset,
    dirichlet_partition,
    iid_partition,
    label_tv_distance,
    load_csv,
    synth_classification,
    train_test_split,
)
from fedfa.errors import ConfigError
from fedfa.params import ModelSpec, evaluate, evaluate_gradient


def balanced(n=200, C=4, d=3, seed=0):
    return synth_classification(n, d, C, 1.0, seed)


# --- synthetic data --------------------------------------------------------

def test_synth_is_deterministic():
    a = synth_classification(300, 5, 3, 1.0, seed=11)
    b = synth_classification(300, 5, 3, 1.0, seed=11)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = synth_classification(300, 5, 3, 1.0, seed=12)
    assert a.features.tobytes() != c.features.tobytes()


def test_zero_spread_puts_points_on_class_means():
    ds = synth_classification(50, 4, 2, 0.0, seed=1)
    for c in range(2):
        rows = ds.features[ds.labels == c]
        assert np.all(rows == rows[0])
    assert not np.array_equal(ds.features[ds.labels == 0][0], ds.features[ds.labels == 1][0])


def test_synth_labels_balanced():
    ds = synth_classification(103, 2, 10, 1.0, seed=0)
    hist = ds.label_histogram()
    assert hist.max() - hist.min() <= 1


def test_scale_ratio_shrinks_trailing_features():
    base = synth_classification(500, 6, 3, 1.0, seed=2)
    scaled = synth_classification(500, 6, 3, 1.0, seed=2, scale_ratio=100.0)
    assert np.allclose(scaled.features[:, 0], base.features[:, 0])
    assert np.allclose(scaled.features[:, -1], base.features[:, -1] / 100.0)


def test_separable_task_learned_centrally():
    # oracle baseline: full-batch gradient descent on a held-out split
    ds = synth_classification(1000, 10, 10, 0.5, seed=0)
    train, test = train_test_split(ds, 0.2, seed=0)
    model = ModelSpec("logistic_regression", (10, 10))
    w = np.zeros(model.n_params)
    for _ in range(300):
        w -= 0.5 * evaluate_gradient(model, w, train)
    assert evaluate(model, w, test)[1] >= 0.90


def test_bad_synth_arguments():
    with pytest.raises(ConfigError):
        synth_classification(0, 2, 2, 1.0, 0)
    with pytest.raises(ConfigError):
        synth_classification(10, 2, 2, -1.0, 0)


def test_dataset_validation():
    with pytest.raises(ConfigError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]))
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 2)), np.array([0, -1]))
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), n_classes=2)
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 2)), np.array([0.5, 1.0]))


def test_train_test_split_disjoint():
    ds = balanced(100)
    tr, te = train_test_split(ds, 0.25, seed=3)
    assert len(tr) == 75 and len(te) == 25
    rows = {r.tobytes() for r in tr.features} & {r.tobytes() for r in te.features}
    assert not rows


# --- partitions ------------------------------------------------------------

def test_iid_examples():
    ds = balanced(100)
    assert iid_partition(ds, 1, 0).sizes() == [100]
    assert sorted(iid_partition(ds, 4, 0).sizes()) == [25, 25, 25, 25]
    one_each = iid_partition(ds, 100, 0)
    assert sorted(np.concatenate(one_each.assignments).tolist()) == list(range(100))
    assert set(one_each.sizes()) == {1}
    with pytest.raises(ConfigError):
        iid_partition(ds, 101, 0)


def test_dirichlet_huge_alpha_matches_global_histogram():
    ds = synth_classification(4000, 2, 4, 1.0, seed=0)
    plan = dirichlet_partition(ds, 4, 1e6, seed=0)
    glob = ds.label_histogram() / len(ds)
    for idx in plan.assignments:
        h = np.bincount(ds.labels[idx], minlength=4) / len(idx)
        assert np.all(np.abs(h - glob) <= 0.05)


def test_dirichlet_small_alpha_concentrates_labels():
    ds = synth_classification(1000, 2, 10, 1.0, seed=0)
    per_seed = []
    for seed in range(20):
        plan = dirichlet_partition(ds, 10, 0.1, seed=seed)
        shares = [np.bincount(ds.labels[idx], minlength=10).max() / len(idx) for idx in plan.assignments]
        per_seed.append(np.median(shares))
    assert np.median(per_seed) > 0.5


def test_tv_distance_falls_as_alpha_grows():
    ds = synth_classification(2000, 2, 10, 1.0, seed=0)
    tv = [np.mean([label_tv_distance(ds, dirichlet_partition(ds, 10, a, seed=s)) for s in range(5)])
          for a in (0.1, 0.5, 5.0, 1e6)]
    assert all(x >= y for x, y in zip(tv, tv[1:])), tv


def test_dirichlet_deterministic():
    ds = balanced(300)
    a = dirichlet_partition(ds, 7, 0.3, seed=5)
    b = dirichlet_partition(ds, 7, 0.3, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.assignments, b.assignments))


def test_dirichlet_infeasible():
    ds = balanced(10)
    with pytest.raises(ConfigError):
        dirichlet_partition(ds, 11, 0.5, 0)
    with pytest.raises(ConfigError):
        dirichlet_partition(ds, 2, 0.0, 0)
    # ten samples over ten clients at tiny alpha practically never leaves every client nonempty
    with pytest.raises(ConfigError, match="empty client"):
        dirichlet_partition(ds, 10, 1e-3, 0)


@pytest.mark.property
@settings(max_examples=60, deadline=None)
@given(n=st.integers(20, 300), C=st.integers(1, 6), m=st.integers(1, 12),
       alpha=st.sampled_from([0.05, 0.1, 0.5, 1.0, 10.0, 1e6]), seed=st.integers(0, 10_000))
def test_partitions_are_disjoint_covers(n, C, m, alpha, seed):
    ds = synth_classification(n, 2, C, 1.0, seed)
    plans = [iid_partition(ds, m, seed)]
    try:
        plans.append(dirichlet_partition(ds, m, alpha, seed))
    except ConfigError as exc:
        assert "empty client" in str(exc)
    for plan in plans:
        allidx = np.concatenate(plan.assignments)
        assert len(allidx) == n
        assert np.array_equal(np.sort(allidx), np.arange(n))
        assert all(len(a) > 0 for a in plan.assignments)
        assert plan.n_clients == m


# --- CSV -------------------------------------------------------------------

def test_csv_three_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1.0,2.0,0\n3.0,4.0,1\n5.0,6.0,0\n")
    ds = load_csv(p, label_column=2, header=False)
    assert ds.features.shape == (3, 2)
    assert ds.features[1].tolist() == [3.0, 4.0]
    assert ds.labels.tolist() == [0, 1, 0]


def test_csv_header_and_named_label(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("y,a,b\n1,0.5,0.25\n0,1.5,2.5\n")
    ds = load_csv(p, label_column="y", header=True)
    assert ds.features.tolist() == [[0.5, 0.25], [1.5, 2.5]]
    assert ds.labels.tolist() == [1, 0]


def test_csv_empty_file(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(ConfigError, match="empty"):
        load_csv(p, 0)


def test_csv_parse_error_names_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,y\n1,2,0\n1,oops,1\n")
    with pytest.raises(ConfigError, match="row 3"):
        load_csv(p, "y")


def test_csv_missing_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b\n1,0\n")
    with pytest.raises(ConfigError, match="no column"):
        load_csv(p, "label")
    with pytest.raises(ConfigError, match="out of range"):
        load_csv(p, 5)


def test_csv_rejects_fractional_label(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,0.5\n")
    with pytest.raises(ConfigError, match="class id"):
        load_csv(p, 1, header=False)
