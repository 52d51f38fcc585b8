import math

import numpy as np
import pytest

from exflow.data import (
    Dataset,
    Standardizer,
    SyntheticSpec,
    class_mean,
    generate_synthetic,
    load_dataset,
    save_dataset,
    standardize,
)
from exflow.errors import ConfigError, DataError


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(dim=1, n_tasks=2, task_size=100)
    with pytest.raises(ConfigError):
        SyntheticSpec(dim=10, n_tasks=0, task_size=100)
    with pytest.raises(ConfigError):
        SyntheticSpec(dim=10, n_tasks=4, task_size=4)  # task 4 has 5 classes
    with pytest.raises(ConfigError):
        SyntheticSpec(dim=10, n_tasks=2, task_size=100, noise_var=0.0)


def test_class_mean_hand_case():
    # task 1 has 2 classes; label 2 gives angle 2*pi: sin 0, cos 1
    mu = class_mean(1, 2, 2, 6)
    assert np.abs(mu[0::2] - 0.0).max() < 1e-12
    assert np.abs(mu[1::2] - 1.0).max() < 1e-12
    # label 1 gives angle pi: sin 0, cos -1
    mu1 = class_mean(1, 1, 2, 6)
    assert np.abs(mu1[1::2] + 1.0).max() < 1e-12


def test_class_mean_scales_with_task_index():
    a = class_mean(1, 1, 2, 8)
    b = class_mean(4, 1, 2, 8)
    assert np.abs(b - 2.0 * a).max() < 1e-12


def test_class_means_distinct_within_task():
    for t in range(1, 5):
        c = t + 1
        means = [class_mean(t, y, c, 10) for y in range(1, c + 1)]
        for i in range(c):
            for j in range(i + 1, c):
                assert np.abs(means[i] - means[j]).max() > 1e-6


def test_generate_shapes_and_labels():
    spec = SyntheticSpec(dim=12, n_tasks=4, task_size=200, seed=5, test_size=50)
    trains, tests = generate_synthetic(spec)
    assert len(trains) == len(tests) == 4
    for t, (tr, te) in enumerate(zip(trains, tests), start=1):
        assert tr.dim == te.dim == 12
        assert len(tr) == 200 and len(te) == 50
        assert tr.label_set() == list(range(1, t + 2))
        assert tr.task_id == t


def test_generate_reproducible():
    spec = SyntheticSpec(dim=8, n_tasks=2, task_size=100, seed=9)
    a, _ = generate_synthetic(spec)
    b, _ = generate_synthetic(spec)
    for da, db in zip(a, b):
        assert np.array_equal(da.features, db.features)
        assert np.array_equal(da.labels, db.labels)


def test_generate_means_and_noise():
    spec = SyntheticSpec(dim=50, n_tasks=1, task_size=20_000, seed=3, test_size=10)
    trains, _ = generate_synthetic(spec)
    tr = trains[0]
    for y in (1, 2):
        rows = tr.features[tr.labels == y]
        mu = class_mean(1, y, 2, 50)
        assert np.abs(rows.mean(axis=0) - mu).max() < 0.05
        assert abs(rows.var(axis=0).mean() - 0.5) < 0.02


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(20, 5)), rng.integers(1, 4, size=20))
    path = tmp_path / "data.csv"
    save_dataset(ds, path)
    back = load_dataset(path, 5)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    # re-serialization is byte-identical
    path2 = tmp_path / "again.csv"
    save_dataset(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_valid_two_rows(tmp_path):
    p = tmp_path / "two.csv"
    p.write_text("1,0.5,-1.25\n2,3.0,4.5\n")
    ds = load_dataset(p, 2)
    assert len(ds) == 2
    assert ds.label_set() == [1, 2]


def test_load_ragged_row_names_row(tmp_path):
    p = tmp_path / "ragged.csv"
    p.write_text("1,0.5,1.0\n1,0.5\n")
    with pytest.raises(DataError, match="row 2"):
        load_dataset(p, 2)


def test_load_rejects_bad_labels(tmp_path):
    p = tmp_path / "zero.csv"
    p.write_text("0,0.5,1.0\n")
    with pytest.raises(DataError, match="1-based"):
        load_dataset(p, 2)
    p2 = tmp_path / "frac.csv"
    p2.write_text("1.5,0.5,1.0\n")
    with pytest.raises(DataError, match="row 1"):
        load_dataset(p2, 2)


def test_load_rejects_non_finite(tmp_path):
    p = tmp_path / "nan.csv"
    p.write_text("1,nan,1.0\n")
    with pytest.raises(DataError, match="non-finite"):
        load_dataset(p, 2)


def test_load_rejects_non_numeric(tmp_path):
    p = tmp_path / "word.csv"
    p.write_text("1,abc,1.0\n")
    with pytest.raises(DataError, match="row 1"):
        load_dataset(p, 2)


def test_load_rejects_label_gaps(tmp_path):
    p = tmp_path / "gap.csv"
    p.write_text("1,0.0,0.0\n3,1.0,1.0\n")
    with pytest.raises(DataError, match="contiguous"):
        load_dataset(p, 2)
    # a run that starts above 1 is fine (class-increment files)
    p2 = tmp_path / "shifted.csv"
    p2.write_text("4,0.0,0.0\n5,1.0,1.0\n")
    assert load_dataset(p2, 2).label_set() == [4, 5]


def test_load_missing_file(tmp_path):
    with pytest.raises(DataError, match="cannot open"):
        load_dataset(tmp_path / "absent.csv", 3)


def test_load_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(DataError, match="no data rows"):
        load_dataset(p, 3)


def test_standardize_train_statistics():
    rng = np.random.default_rng(1)
    train = Dataset(5.0 + 3.0 * rng.normal(size=(200, 4)), np.ones(200, dtype=int))
    other = Dataset(rng.normal(size=(50, 4)), np.ones(50, dtype=int))
    new_train, [new_other], tf = standardize(train, [other])
    assert np.abs(new_train.features.mean(axis=0)).max() < 1e-10
    assert np.abs(new_train.features.std(axis=0) - 1.0).max() < 1e-10
    # same transform applied to the other set
    assert np.abs(new_other.features - tf.apply(other.features)).max() == 0.0


def test_standardize_constant_column():
    feats = np.ones((30, 3))
    feats[:, 1] = np.linspace(0, 1, 30)
    train = Dataset(feats, np.ones(30, dtype=int))
    new_train, _, tf = standardize(train)
    assert np.all(new_train.features[:, 0] == 0.0)
    assert tf.scale[0] == 1e-8


def test_standardize_roundtrip():
    rng = np.random.default_rng(2)
    train = Dataset(rng.normal(size=(100, 6)) * 7 + 2, np.ones(100, dtype=int))
    new_train, _, tf = standardize(train)
    back = tf.invert(new_train.features)
    assert np.abs(back - train.features).max() < 1e-10


def test_standardize_empty_rejected():
    with pytest.raises(DataError):
        standardize(Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int)))


def test_identity_transform():
    tf = Standardizer.identity(4)
    assert tf.is_identity()
    x = np.random.default_rng(3).normal(size=(5, 4))
    assert np.array_equal(tf.apply(x), x)
