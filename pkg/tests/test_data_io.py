"""IDX parsing, binarization, inversion, and balanced pairing."""

import gzip
import struct

import numpy as np
import pytest

from hvaeood.data_io import (
    EmptyInput,
    IdxDataset,
    MagicMismatch,
    TruncatedPayload,
    UnsupportedRank,
    balanced_pair,
    binarize_dynamic,
    invert,
    load_idx,
    parse_idx,
    save_idx,
    serialize_idx,
)

rng = np.random.default_rng(31)


def idx_bytes(rank, dims, payload):
    header = struct.pack(">bbbb", 0, 0, 8, rank) + struct.pack(f">{rank}i", *dims)
    return header + payload


def test_parse_minimal_image_file(tmp_path):
    payload = bytes(range(256)) * 6 + bytes(32)  # 2*28*28 = 1568
    path = tmp_path / "img.idx"
    path.write_bytes(idx_bytes(3, (2, 28, 28), payload))
    arr = parse_idx(path)
    assert arr.shape == (2, 28, 28)
    assert arr.dtype == np.uint8
    assert arr[0, 0, 1] == 1


def test_parse_label_file(tmp_path):
    path = tmp_path / "labels.idx"
    path.write_bytes(idx_bytes(1, (5,), bytes([1, 2, 3, 4, 5])))
    arr = parse_idx(path)
    assert arr.shape == (5,)
    assert list(arr) == [1, 2, 3, 4, 5]


def test_bad_type_byte_is_magic_mismatch(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(struct.pack(">bbbb", 0, 0, 7, 3) + bytes(12))
    with pytest.raises(MagicMismatch):
        parse_idx(path)


def test_nonzero_prefix_is_magic_mismatch(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(struct.pack(">bbbb", 1, 0, 8, 3) + bytes(12))
    with pytest.raises(MagicMismatch):
        parse_idx(path)


def test_unsupported_rank(tmp_path):
    path = tmp_path / "rank2.idx"
    path.write_bytes(idx_bytes(2, (2, 2), bytes(4)))
    with pytest.raises(UnsupportedRank):
        parse_idx(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "short.idx"
    path.write_bytes(idx_bytes(3, (2, 28, 28), bytes(100)))
    with pytest.raises(TruncatedPayload):
        parse_idx(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "long.idx"
    path.write_bytes(idx_bytes(1, (3,), bytes(5)))
    with pytest.raises(TruncatedPayload):
        parse_idx(path)


def test_round_trip_bit_exact(tmp_path):
    images = rng.integers(0, 256, size=(7, 28, 28), dtype=np.uint8)
    path = tmp_path / "round.idx"
    save_idx(images, path)
    raw = path.read_bytes()
    assert serialize_idx(parse_idx(path)) == raw


def test_gzip_transparent(tmp_path):
    images = rng.integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
    path = tmp_path / "img.idx.gz"
    path.write_bytes(gzip.compress(serialize_idx(images)))
    arr = parse_idx(path)
    np.testing.assert_array_equal(arr, images)


def test_load_idx_with_labels(tmp_path):
    images = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
    labels = np.array([0, 1, 2, 3], dtype=np.uint8)
    save_idx(images, tmp_path / "imgs.idx")
    save_idx(labels, tmp_path / "labels.idx")
    ds = load_idx(tmp_path / "imgs.idx", tmp_path / "labels.idx", name="toy", split="train")
    assert ds.num_examples == 4
    assert ds.pixel_dim == 784
    assert list(ds.labels) == [0, 1, 2, 3]


def test_dataset_invariants():
    with pytest.raises(ValueError):
        IdxDataset(images=np.zeros((2, 14, 14), dtype=np.uint8), labels=None, name="x", split="test")
    with pytest.raises(ValueError):
        IdxDataset(
            images=np.zeros((2, 28, 28), dtype=np.uint8),
            labels=np.zeros(3, dtype=np.uint8),
            name="x",
            split="test",
        )


def test_binarize_extremes():
    images = np.zeros((1, 28, 28), dtype=np.uint8)
    images[0, :14] = 255
    batch = binarize_dynamic(images, np.random.default_rng(0))
    data = batch.data.reshape(28, 28)
    assert np.all(data[:14] == 1.0)
    assert np.all(data[14:] == 0.0)
    assert set(np.unique(batch.data)) <= {0.0, 1.0}


def test_binarize_mid_grey_frequency():
    # Bernoulli(128/255) oracle: binomial CI on the empirical mean
    n = 100_000
    images = np.full((1, 28, 28), 128, dtype=np.uint8)
    draws = np.concatenate(
        [
            binarize_dynamic(images, np.random.default_rng(seed)).data
            for seed in range(n // 784 + 1)
        ],
        axis=None,
    )[:n]
    p = 128 / 255
    se = np.sqrt(p * (1 - p) / n)
    assert abs(draws.mean() - p) < 3 * se


def test_binarize_two_seeds_differ():
    images = np.full((1, 28, 28), 128, dtype=np.uint8)
    a = binarize_dynamic(images, np.random.default_rng(1)).data
    b = binarize_dynamic(images, np.random.default_rng(2)).data
    assert np.any(a != b)


def test_invert_involution():
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    assert invert(np.zeros((1, 28, 28), dtype=np.uint8)).max() == 255
    assert invert(np.full((1, 28, 28), 255, dtype=np.uint8)).min() == 0
    np.testing.assert_array_equal(invert(invert(images)), images)


def test_balanced_pair_equal_sizes_pass_through():
    a = rng.normal(size=100)
    b = rng.normal(size=100)
    out_a, out_b = balanced_pair(a, b, np.random.default_rng(0))
    np.testing.assert_array_equal(out_a, a)
    np.testing.assert_array_equal(out_b, b)


def test_balanced_pair_subsamples_larger():
    a = rng.normal(size=70_000)
    b = rng.normal(size=32_460)
    out_a, out_b = balanced_pair(a, b, np.random.default_rng(0))
    assert out_a.shape == out_b.shape == (32_460,)
    np.testing.assert_array_equal(out_b, b)
    assert set(out_a).issubset(set(a))


def test_balanced_pair_deterministic():
    a = rng.normal(size=5)
    b = rng.normal(size=3)
    first = balanced_pair(a, b, np.random.default_rng(12))
    second = balanced_pair(a, b, np.random.default_rng(12))
    np.testing.assert_array_equal(first[0], second[0])
    assert set(first[0]).issubset(set(a))
    assert first[0].shape == (3,)


def test_balanced_pair_empty_input():
    with pytest.raises(EmptyInput):
        balanced_pair(np.array([]), np.array([1.0]), np.random.default_rng(0))
