import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adlm.data import (BatchPlan, DataLoadError, Dataset, load_idx, one_hot, scale_features, synthetic_dataset,
                       write_idx)
from conftest import MNIST_DIR


def test_bundled_subset_shapes(mnist):
    train, test = mnist
    assert (train.n, train.d, train.n_classes) == (8000, 784, 10)
    assert test.n == 2000
    assert train.image_shape == (28, 28)


def test_raw_mnist_ranges():
    from adlm.data import load_mnist
    raw = load_mnist(MNIST_DIR, "test")
    x = raw.features
    assert x.min() == 0 and x.max() == 255
    assert np.all(raw.labels.sum(axis=1) == 1)


def _write_pair(tmp_path, images, labels, gz=False):
    suffix = ".gz" if gz else ""
    ip, lp = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
    write_idx(ip, images)
    write_idx(lp, labels)
    return ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_idx_roundtrip(tmp_path, gz):
    images = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    ip, lp = _write_pair(tmp_path, images, np.array([1, 9], dtype=np.uint8), gz)
    ds = load_idx(ip, lp)
    np.testing.assert_array_equal(ds.features, images.reshape(2, -1))
    np.testing.assert_array_equal(ds.labels.argmax(axis=1), [1, 9])


def test_truncated_file_names_file_and_offset(tmp_path):
    ip, lp = _write_pair(tmp_path, np.zeros((4, 2, 2), np.uint8), np.zeros(4, np.uint8))
    ip.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(DataLoadError, match=r"img.*offset"):
        load_idx(ip, lp)


def test_bad_magic(tmp_path):
    ip, lp = _write_pair(tmp_path, np.zeros((1, 2, 2), np.uint8), np.zeros(1, np.uint8))
    lp.write_bytes(struct.pack(">I", 0x0803) + lp.read_bytes()[4:])
    with pytest.raises(DataLoadError, match="bad magic"):
        load_idx(ip, lp)


def test_count_mismatch(tmp_path):
    ip, lp = _write_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(DataLoadError, match="labels"):
        load_idx(ip, lp)


def test_gzip_detected_by_content(tmp_path):
    raw = struct.pack(">II", 0x0801, 1) + b"\x04"
    (tmp_path / "lab").write_bytes(gzip.compress(raw))
    write_idx(tmp_path / "img", np.zeros((1, 1, 1), np.uint8))
    assert load_idx(tmp_path / "img", tmp_path / "lab").labels.argmax() == 4


def test_scale_examples():
    ds = Dataset(np.array([[2.0, 4.0, 6.0, 8.0], [0.0, 0.0, 0.0, 0.0]]), one_hot([0, 1], 2))
    s = scale_features(ds)
    np.testing.assert_allclose(s.features[0], 0.5)
    assert np.linalg.norm(s.features[0]) == pytest.approx(1.0)
    np.testing.assert_array_equal(s.features[1], 0.0)
    one = Dataset(np.array([[255.0]]), one_hot([0], 1))
    assert scale_features(one, bounds=np.array([[0.0], [255.0]])).features[0, 0] == 1.0


def test_constant_feature_maps_to_zero():
    ds = Dataset(np.array([[3.0, 1.0], [3.0, 2.0]]), one_hot([0, 1], 2))
    np.testing.assert_array_equal(scale_features(ds).features[:, 0], 0.0)


def test_test_split_clipped_to_train_bounds():
    train = Dataset(np.array([[0.0], [10.0]]), one_hot([0, 1], 2))
    test = Dataset(np.array([[-5.0], [20.0]]), one_hot([0, 1], 2))
    s = scale_features(test, bounds=np.array([[0.0], [10.0]]))
    np.testing.assert_array_equal(s.features[:, 0], [0.0, 1.0])
    assert train.n == 2


def test_mnist_row_norms(mnist):
    for ds in mnist:
        x = ds.features
        assert np.linalg.norm(x, axis=1).max() <= 1 + 1e-12
        assert x.min() >= 0 and x.max() <= 1 / math.sqrt(ds.d) + 1e-15


def test_synthetic_deterministic():
    a = synthetic_dataset(2, 1, 2, seed=7)
    b = synthetic_dataset(2, 1, 2, seed=7)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synthetic_row_norms_over_many_seeds():
    rng = np.random.default_rng(0)
    worst = 0.0
    for seed in range(1000):
        n, d, m = (int(v) for v in rng.integers(1, 12, size=3))
        ds = synthetic_dataset(n, d, m, seed)
        worst = max(worst, float(np.linalg.norm(ds.features, axis=1).max()))
        assert np.all(ds.labels.sum(axis=1) == 1)
    assert worst <= 1 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 10), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_batch_plan_visits_rows_once(n, bs, epochs, seed):
    bs = min(bs, n)
    plan = BatchPlan(n, bs, epochs)
    batches = plan.epoch_batches(np.random.default_rng(seed))
    assert batches.shape == (n // bs, bs)
    assert len(np.unique(batches)) == batches.size
    again = plan.epoch_batches(np.random.default_rng(seed))
    np.testing.assert_array_equal(batches, again)
    assert plan.total_steps == (n // bs) * epochs


def test_access_counter_and_read_only():
    ds = synthetic_dataset(5, 2, 2, 0)
    before = ds.access_count
    x = ds.features
    assert ds.access_count == before + 1
    with pytest.raises(ValueError):
        x[0, 0] = 1.0


def test_labels_must_be_one_hot():
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 2)), np.array([[1.0, 1.0]]))
