"""Unit tests for dataset generation, labeling rules, IDX parsing, batching."""

import struct

import numpy as np
import pytest

from acda.data import (Dataset, LabelingFunction, batch_iterator, export_csv,
                       gen_gaussian_shift_pair, gen_two_moons_pair, load_csv,
                       load_idx, oracle_label, standardize_features)
from acda.errors import DataError


# ---------------------------------------------------------------- two moons


def test_moons_shapes_and_tags():
    pair = gen_two_moons_pair(120, 80, rotation_deg=30.0, noise_sd=0.05,
                              label_flip_rate=0.1, seed=0)
    assert pair.source.features.shape == (120, 2)
    assert pair.target.features.shape == (80, 2)
    assert pair.source.domain_tag == "source"
    assert pair.target.domain_tag == "target"
    assert set(np.unique(pair.source.labels)) <= {0, 1}
    assert len(pair.source) == 120 and pair.target.dim == 2


def test_moons_labels_come_from_the_labeling_rules():
    pair = gen_two_moons_pair(60, 60, rotation_deg=45.0, noise_sd=0.1,
                              label_flip_rate=0.2, seed=5)
    np.testing.assert_array_equal(pair.source.labels,
                                  pair.f_source.label(pair.source.features))
    np.testing.assert_array_equal(pair.target.labels,
                                  pair.f_target.label(pair.target.features))


def test_moons_zero_flip_means_shared_rule():
    pair = gen_two_moons_pair(30, 30, rotation_deg=60.0, noise_sd=0.1,
                              label_flip_rate=0.0, seed=2)
    grid = np.stack(np.meshgrid(np.linspace(-2, 3, 21),
                                np.linspace(-2, 2, 21)), axis=-1).reshape(-1, 2)
    np.testing.assert_array_equal(pair.f_source.label(grid),
                                  pair.f_target.label(grid))


def test_moons_flip_rate_is_approximately_honored():
    pair = gen_two_moons_pair(4000, 4000, rotation_deg=40.0, noise_sd=0.08,
                              label_flip_rate=0.12, seed=9)
    disagree = (pair.f_source.label(pair.target.features)
                != pair.target.labels).mean()
    assert 0.06 <= disagree <= 0.18


def test_moons_determinism_and_seed_sensitivity():
    a = gen_two_moons_pair(50, 50, 30.0, 0.1, 0.1, seed=4)
    b = gen_two_moons_pair(50, 50, 30.0, 0.1, 0.1, seed=4)
    c = gen_two_moons_pair(50, 50, 30.0, 0.1, 0.1, seed=6)
    np.testing.assert_array_equal(a.source.features, b.source.features)
    np.testing.assert_array_equal(a.target.labels, b.target.labels)
    assert not np.array_equal(a.source.features, c.source.features)


def test_moons_input_validation():
    with pytest.raises(ValueError):
        gen_two_moons_pair(1, 30, 30.0, 0.1, 0.1, seed=0)
    with pytest.raises(ValueError):
        gen_two_moons_pair(30, 30, 30.0, -0.1, 0.1, seed=0)
    with pytest.raises(ValueError):
        gen_two_moons_pair(30, 30, 30.0, 0.1, 0.5, seed=0)


# ---------------------------------------------------------------- gaussians


def test_gaussian_full_swap_with_two_classes_inverts_the_rule():
    pair = gen_gaussian_shift_pair(n_classes=2, dim=3, mean_shift=1.0,
                                   covariance_scale=1.0, swap_fraction=1.0,
                                   n_source=40, n_target=40, seed=1)
    pts = np.random.default_rng(0).normal(size=(64, 3)) * 2
    np.testing.assert_array_equal(pair.f_target.label(pts),
                                  1 - pair.f_source.label(pts))


def test_gaussian_no_swap_shares_the_rule():
    pair = gen_gaussian_shift_pair(n_classes=3, dim=2, mean_shift=2.0,
                                   covariance_scale=1.5, swap_fraction=0.0,
                                   n_source=30, n_target=30, seed=2)
    pts = np.random.default_rng(1).normal(size=(50, 2)) * 3
    np.testing.assert_array_equal(pair.f_source.label(pts),
                                  pair.f_target.label(pts))


def test_gaussian_mean_shift_moves_target_cloud():
    pair = gen_gaussian_shift_pair(n_classes=2, dim=2, mean_shift=5.0,
                                   covariance_scale=0.5, swap_fraction=0.0,
                                   n_source=300, n_target=300, seed=3)
    gap = np.linalg.norm(pair.target.features.mean(axis=0)
                         - pair.source.features.mean(axis=0))
    assert gap > 2.0


# ---------------------------------------------------------- labeling rules


def test_labeling_ties_prefer_the_lower_anchor_index():
    anchors = np.array([[0.0, 0.0], [2.0, 0.0]])
    f = LabelingFunction(anchors=anchors, anchor_labels=np.array([0, 1]),
                         n_classes=2)
    assert f.label(np.array([[1.0, 0.0]]))[0] == 0  # equidistant -> first wins


def test_labeling_score_is_clipped_to_unit_interval():
    anchors = np.array([[0.0], [10.0]])
    f = LabelingFunction(anchors=anchors, anchor_labels=np.array([0, 1]),
                         n_classes=2)
    scores = f.score(np.array([[-50.0], [0.0], [5.0], [10.0], [60.0]]))
    assert np.all(scores >= 0.0) and np.all(scores <= 1.0)
    assert scores[0] == 0.0 and scores[-1] == 1.0
    assert abs(scores[2] - 0.5) < 1e-12


def test_oracle_label_reads_the_target_rule():
    pair = gen_two_moons_pair(40, 40, 20.0, 0.05, 0.1, seed=8)
    idx = np.array([0, 3, 17])
    np.testing.assert_array_equal(
        oracle_label(pair, idx), pair.f_target.label(pair.target.features[idx]))


# ------------------------------------------------------------------- idx io


def _write_idx_pair(tmp_path, n=7, rows=3, cols=2):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    images_path = tmp_path / "imgs.idx3-ubyte"
    labels_path = tmp_path / "labs.idx1-ubyte"
    images_path.write_bytes(struct.pack(">iiii", 2051, n, rows, cols)
                            + pixels.tobytes())
    labels_path.write_bytes(struct.pack(">ii", 2049, n) + labels.tobytes())
    return images_path, labels_path, pixels, labels


def test_idx_round_trip(tmp_path):
    images_path, labels_path, pixels, labels = _write_idx_pair(tmp_path)
    ds = load_idx(images_path, labels_path, domain_tag="target")
    assert ds.features.shape == (7, 6)
    assert ds.domain_tag == "target"
    np.testing.assert_allclose(ds.features,
                               pixels.reshape(7, -1).astype(np.float64) / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)


def test_idx_max_items(tmp_path):
    images_path, labels_path, _, labels = _write_idx_pair(tmp_path)
    ds = load_idx(images_path, labels_path, max_items=3)
    assert len(ds) == 3
    np.testing.assert_array_equal(ds.labels, labels[:3])


def test_idx_bad_magic_rejected(tmp_path):
    images_path, labels_path, _, _ = _write_idx_pair(tmp_path)
    blob = images_path.read_bytes()
    images_path.write_bytes(struct.pack(">iiii", 1234, 7, 3, 2) + blob[16:])
    with pytest.raises(DataError):
        load_idx(images_path, labels_path)


def test_idx_count_mismatch_rejected(tmp_path):
    images_path, labels_path, _, _ = _write_idx_pair(tmp_path)
    labels_path.write_bytes(struct.pack(">ii", 2049, 3) + b"\x00\x01\x02")
    with pytest.raises(DataError):
        load_idx(images_path, labels_path)


def test_idx_truncation_rejected(tmp_path):
    images_path, labels_path, _, _ = _write_idx_pair(tmp_path)
    blob = images_path.read_bytes()
    images_path.write_bytes(blob[:-5])
    with pytest.raises(DataError):
        load_idx(images_path, labels_path)


# --------------------------------------------------------------- utilities


def test_batch_iterator_partitions_without_replacement():
    batches = list(batch_iterator(23, batch_size=5, seed=1, epoch=0))
    sizes = [len(b) for b in batches]
    assert sizes == [5, 5, 5, 5, 3]
    np.testing.assert_array_equal(np.sort(np.concatenate(batches)), np.arange(23))


def test_batch_iterator_varies_by_epoch_not_by_call():
    a = list(batch_iterator(16, 4, seed=3, epoch=0))
    b = list(batch_iterator(16, 4, seed=3, epoch=0))
    c = list(batch_iterator(16, 4, seed=3, epoch=1))
    np.testing.assert_array_equal(np.concatenate(a), np.concatenate(b))
    assert not np.array_equal(np.concatenate(a), np.concatenate(c))


def test_standardize_is_fit_on_source_only():
    rng = np.random.default_rng(4)
    src = rng.normal(loc=5.0, scale=3.0, size=(200, 3))
    tgt = rng.normal(loc=9.0, scale=3.0, size=(100, 3))
    sx, tx, mean, sd = standardize_features(src, tgt)
    np.testing.assert_allclose(sx.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(sx.std(axis=0), 1.0, atol=1e-12)
    assert np.all(tx.mean(axis=0) > 0.5)  # target keeps its shift
    np.testing.assert_allclose(mean, src.mean(axis=0))


def test_standardize_guards_constant_features():
    src = np.ones((10, 2))
    src[:, 1] = np.arange(10)
    sx, tx, _, sd = standardize_features(src, src.copy())
    assert sd[0] == 1.0
    assert np.all(np.isfinite(sx))


def test_csv_round_trip_is_exact(tmp_path):
    pair = gen_two_moons_pair(20, 25, 15.0, 0.1, 0.1, seed=12)
    path = tmp_path / "pair.csv"
    export_csv(path, pair.source, pair.target)
    source, target = load_csv(path)
    np.testing.assert_array_equal(source.features, pair.source.features)
    np.testing.assert_array_equal(target.features, pair.target.features)
    np.testing.assert_array_equal(source.labels, pair.source.labels)
    assert target.domain_tag == "target"


def test_dataset_subset_keeps_alignment():
    pair = gen_two_moons_pair(30, 30, 10.0, 0.1, 0.1, seed=13)
    sub = pair.source.subset(np.array([2, 5, 7]))
    np.testing.assert_array_equal(sub.labels, pair.source.labels[[2, 5, 7]])
    np.testing.assert_array_equal(sub.features, pair.source.features[[2, 5, 7]])
