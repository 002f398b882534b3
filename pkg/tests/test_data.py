import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semanom.data import (DataFormatError, LabeledDataset, load_cifar_binary, load_idx,
                          load_raw_tensor, save_raw_tensor, synth_shapes, write_idx)
from semanom.rng import Rng
from semanom.splits import make_holdout_splits
from semanom.transforms import (MASK_SIZE, augment_crop_flip, crop_flip, draw_mask_position,
                                random_center_mask, rotate, rotate_batch)


def balanced(k, n, side=4):
    labels = np.repeat(np.arange(k), n)
    images = np.zeros((k * n, 1, side, side)) + labels[:, None, None, None] / k
    return LabeledDataset(images, labels, [f"c{i}" for i in range(k)])


# ---------------------------------------------------------------- loaders

def test_cifar_single_record(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(bytes([7]) + bytes([255]) * 3072)
    ds = load_cifar_binary(p)
    assert len(ds) == 1 and ds.labels[0] == 7
    assert ds.images.shape == (1, 3, 32, 32) and (ds.images == 1.0).all()


def test_cifar_two_records_plane_order(tmp_path):
    rec = bytearray([3]) + bytes([10]) * 1024 + bytes([20]) * 1024 + bytes([30]) * 1024
    p = tmp_path / "b.bin"
    p.write_bytes(bytes(rec) * 2)
    ds = load_cifar_binary(p)
    assert len(ds) == 2
    np.testing.assert_array_equal(ds.images[1, :, 0, 0] * 255, [10, 20, 30])


def test_cifar_truncated(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(bytes(3072))
    with pytest.raises(DataFormatError, match="truncated record"):
        load_cifar_binary(p)


def test_cifar_bad_label(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(bytes([10]) + bytes(3072))
    with pytest.raises(DataFormatError, match="label byte 10"):
        load_cifar_binary(p)


def test_idx_values_and_dims(tmp_path):
    write_idx(np.array([[[0, 128], [255, 0]]]), [4], tmp_path / "i", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()
    assert raw[8:12] == b"\x00\x00\x00\x02"
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(ds.images.ravel(), [0, 128 / 255, 1, 0])
    assert ds.labels.tolist() == [4]


def test_idx_count_mismatch(tmp_path):
    write_idx(np.zeros((10, 2, 2)), np.zeros(9), tmp_path / "i", tmp_path / "l")
    with pytest.raises(DataFormatError, match="count mismatch"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_magic_mismatch(tmp_path):
    write_idx(np.zeros((1, 2, 2)), [0], tmp_path / "i", tmp_path / "l")
    with pytest.raises(DataFormatError, match="magic mismatch"):
        load_idx(tmp_path / "l", tmp_path / "i")


def test_semt_minimal(tmp_path):
    p = tmp_path / "t.semt"
    p.write_bytes(struct.pack("<4sIIIIII", b"SEMT", 1, 1, 1, 1, 1, 2) + bytes([1, 0]))
    ds = load_raw_tensor(p)
    assert ds.images.shape == (1, 1, 1, 1) and ds.images[0, 0, 0, 0] == 0.0
    assert ds.labels.tolist() == [1] and ds.n_classes == 2


def test_semt_size_mismatch(tmp_path):
    p = tmp_path / "t.semt"
    p.write_bytes(struct.pack("<4sIIIIII", b"SEMT", 1, 2, 1, 1, 1, 2) + bytes([1, 0]))
    with pytest.raises(DataFormatError, match="size mismatch"):
        load_raw_tensor(p)


def test_semt_bad_magic_and_version(tmp_path):
    p = tmp_path / "t.semt"
    p.write_bytes(struct.pack("<4sIIIIII", b"SEMX", 1, 1, 1, 1, 1, 2) + bytes([1, 0]))
    with pytest.raises(DataFormatError, match="bad magic"):
        load_raw_tensor(p)
    p.write_bytes(struct.pack("<4sIIIIII", b"SEMT", 2, 1, 1, 1, 1, 2) + bytes([1, 0]))
    with pytest.raises(DataFormatError, match="version"):
        load_raw_tensor(p)


def test_semt_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    ds = LabeledDataset(rng.integers(0, 256, (5, 3, 4, 4)) / 255.0, [0, 1, 2, 1, 0], ["a", "b", "c"])
    save_raw_tensor(ds, tmp_path / "t.semt")
    back = load_raw_tensor(tmp_path / "t.semt")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)


# ---------------------------------------------------------------- synthetic shapes

def test_synth_counts_and_range():
    ds = synth_shapes(10, ["disk", "square", "cross", "bar"], 16, Rng(0))
    assert len(ds) == 40 and ds.images.shape == (40, 3, 16, 16)
    assert np.bincount(ds.labels).tolist() == [10] * 4
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_synth_deterministic():
    a = synth_shapes(3, ["disk", "bar"], 16, Rng(5))
    b = synth_shapes(3, ["disk", "bar"], 16, Rng(5))
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, synth_shapes(3, ["disk", "bar"], 16, Rng(6)).images)


def test_synth_errors():
    with pytest.raises(ValueError, match="unknown shape kind"):
        synth_shapes(1, ["disk", "star"], 16, Rng(0))
    with pytest.raises(ValueError, match=">= 16"):
        synth_shapes(1, ["disk"], 12, Rng(0))


def test_synth_colour_statistics_shared_across_classes():
    # mean colour should not give the class away
    ds = synth_shapes(150, ["disk", "square", "cross", "bar"], 16, Rng(2))
    means = np.array([ds.images[ds.labels == c].mean() for c in range(4)])
    assert np.ptp(means) < 0.05


# ---------------------------------------------------------------- splits

def test_ten_class_splits():
    splits = make_holdout_splits(balanced(10, 3), balanced(10, 1000, side=1), 1)
    assert len(splits) == 10
    assert sorted(s.held_out_class for s in splits) == list(range(10))
    for s in splits:
        assert s.skew == 0.10
        assert s.train.n_classes == 9
        assert np.bincount(s.train.labels, minlength=9).tolist() == [3] * 9
        assert s.held_out_name not in s.train.class_names


def test_twelve_class_skew():
    for s in make_holdout_splits(balanced(12, 2), balanced(12, 50), 3):
        assert s.skew == pytest.approx(1 / 12)
        assert s.skew == np.count_nonzero(s.is_anomaly) / len(s)
        assert s.trials == 3


def test_remap_is_order_preserving():
    s = make_holdout_splits(balanced(4, 2), balanced(4, 2), 1)[1]
    assert s.class_map == [0, 2, 3]
    assert s.train.class_names == ["c0", "c2", "c3"]
    # images carry their original class as intensity
    np.testing.assert_allclose(s.train.images[:, 0, 0, 0], np.array(s.class_map)[s.train.labels] / 4)
    assert (s.test_labels[s.is_anomaly] == -1).all()


def test_split_errors():
    test = balanced(4, 2)
    with pytest.raises(ValueError, match="absent from test"):
        make_holdout_splits(balanced(4, 2), test.subset(test.labels != 2), 1)
    with pytest.raises(ValueError, match="class list"):
        make_holdout_splits(balanced(3, 2), test, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(1, 5))
def test_split_invariants(k, n_train, n_test):
    splits = make_holdout_splits(balanced(k, n_train), balanced(k, n_test), 2)
    assert {s.held_out_class for s in splits} == set(range(k))
    for s in splits:
        assert len(s.train) == (k - 1) * n_train
        assert s.skew == n_test / (k * n_test)


# ---------------------------------------------------------------- rotations

def test_rotate_ccw_by_hand():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])  # [[a,b],[c,d]]
    assert rotate(img, 1).tolist() == [[2.0, 4.0], [1.0, 3.0]]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6))
def test_rotate_composition(side):
    img = np.random.default_rng(side).random((2, side, side))
    np.testing.assert_array_equal(rotate(rotate(img, 1), 1), rotate(img, 2))
    np.testing.assert_array_equal(rotate(img, 0), img)


def test_rotate_batch_all_four():
    imgs = np.random.default_rng(0).random((3, 2, 5, 5))
    b = rotate_batch(imgs)
    assert len(b.images) == 12
    assert np.bincount(b.rotation_labels).tolist() == [3, 3, 3, 3]
    for img, k, src in zip(b.images, b.rotation_labels, np.repeat(imgs, 4, axis=0)):
        np.testing.assert_array_equal(img, rotate(src, k))


def test_rotate_batch_sampled():
    imgs = np.random.default_rng(0).random((50, 1, 4, 4))
    b = rotate_batch(imgs, Rng(3), mode="sampled")
    assert len(b.images) == 50
    assert set(b.rotation_labels.tolist()) == {0, 1, 2, 3}
    for img, k, src in zip(b.images, b.rotation_labels, imgs):
        np.testing.assert_array_equal(img, rotate(src, k))


def test_rotate_batch_non_square():
    with pytest.raises(ValueError, match="square"):
        rotate_batch(np.zeros((1, 1, 4, 5)))


# ---------------------------------------------------------------- masks and crops

def test_mask_geometry_32():
    img = np.ones((3, 32, 32))
    out = random_center_mask(img, Rng(0))
    zeros = out == 0
    assert (zeros.sum(axis=(1, 2)) == MASK_SIZE ** 2).all()
    rows, cols = np.nonzero(zeros[0])
    assert rows.min() >= 5 and rows.max() <= 25 and cols.min() >= 5 and cols.max() <= 25
    assert (zeros[0] == zeros[1]).all()


def test_mask_positions_cover_grid():
    rng = Rng(1)
    seen = {draw_mask_position((32, 32), rng.child(i)) for i in range(2000)}
    assert seen == {(5 + i, 5 + j) for i in range(6) for j in range(6)}


def test_mask_deterministic_and_too_small():
    img = np.ones((1, 26, 26))
    np.testing.assert_array_equal(random_center_mask(img, Rng(4)), random_center_mask(img, Rng(4)))
    with pytest.raises(ValueError, match="too small"):
        random_center_mask(np.ones((1, 25, 25)), Rng(0))


def test_crop_flip_identity_and_involution():
    img = np.random.default_rng(0).random((3, 6, 6))
    np.testing.assert_array_equal(crop_flip(img, 0, 0, 0, False), img)
    np.testing.assert_array_equal(crop_flip(crop_flip(img, 0, 0, 0, True), 0, 0, 0, True), img)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 4), st.integers(0, 1000))
def test_augment_keeps_shape(pad, seed):
    img = np.random.default_rng(seed).random((3, 7, 7))
    out = augment_crop_flip(img, pad, Rng(seed))
    assert out.shape == img.shape
