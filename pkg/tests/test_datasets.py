import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpflow.datasets import (
    DataFormatError,
    Dataset,
    batch_slice,
    global_batch,
    load_csv,
    load_idx,
    one_hot,
    shard,
    synthetic,
    write_csv,
    write_idx,
)


def _idx_pair(tmp_path, images: bytes, labels: bytes):
    img, lbl = tmp_path / "img.idx", tmp_path / "lbl.idx"
    img.write_bytes(images)
    lbl.write_bytes(labels)
    return img, lbl


# ---------------------------------------------------------------- IDX


def test_idx_hand_built_fixture(tmp_path):
    images = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes([255] * 8)
    labels = struct.pack(">II", 0x801, 2) + bytes([3, 7])
    ds = load_idx(*_idx_pair(tmp_path, images, labels))
    np.testing.assert_array_equal(ds.inputs, np.ones((2, 4)))
    np.testing.assert_array_equal(ds.labels, [3, 7])
    assert ds.classes == 10


def test_idx_row_major_and_scaling(tmp_path):
    pix = bytes([0, 51, 102, 153, 204, 255])
    images = struct.pack(">IIII", 0x803, 1, 2, 3) + pix
    labels = struct.pack(">II", 0x801, 1) + b"\x00"
    ds = load_idx(*_idx_pair(tmp_path, images, labels))
    np.testing.assert_allclose(ds.inputs, [[0, 0.2, 0.4, 0.6, 0.8, 1.0]], rtol=1e-15)


def test_idx_labels_with_images_magic(tmp_path):
    images = struct.pack(">IIII", 0x803, 1, 1, 1) + b"\x01"
    labels = struct.pack(">II", 0x803, 1) + b"\x00"
    with pytest.raises(DataFormatError, match="magic.*offset 0"):
        load_idx(*_idx_pair(tmp_path, images, labels))


def test_idx_count_mismatch(tmp_path):
    images = struct.pack(">IIII", 0x803, 3, 1, 1) + b"\x01\x02\x03"
    labels = struct.pack(">II", 0x801, 2) + b"\x00\x01"
    with pytest.raises(DataFormatError, match="offset 4"):
        load_idx(*_idx_pair(tmp_path, images, labels))


def test_idx_truncated_pixels(tmp_path):
    images = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(5)
    labels = struct.pack(">II", 0x801, 2) + b"\x00\x01"
    with pytest.raises(DataFormatError, match="truncated at offset 21"):
        load_idx(*_idx_pair(tmp_path, images, labels))


def test_idx_truncated_header(tmp_path):
    images = struct.pack(">II", 0x803, 2)
    labels = struct.pack(">II", 0x801, 2)
    with pytest.raises(DataFormatError, match="truncated header"):
        load_idx(*_idx_pair(tmp_path, images, labels))


def test_idx_trailing_bytes(tmp_path):
    images = struct.pack(">IIII", 0x803, 1, 1, 1) + b"\x01\x02"
    labels = struct.pack(">II", 0x801, 1) + b"\x00"
    with pytest.raises(DataFormatError, match="trailing"):
        load_idx(*_idx_pair(tmp_path, images, labels))


def test_idx_label_out_of_range(tmp_path):
    images = struct.pack(">IIII", 0x803, 2, 1, 1) + b"\x01\x02"
    labels = struct.pack(">II", 0x801, 2) + b"\x01\x0c"
    with pytest.raises(DataFormatError, match="offset 9"):
        load_idx(*_idx_pair(tmp_path, images, labels))


def test_idx_writer_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
    lab = rng.integers(0, 10, 5)
    write_idx(pix, lab, tmp_path / "a", tmp_path / "b")
    ds = load_idx(tmp_path / "a", tmp_path / "b")
    np.testing.assert_array_equal(ds.inputs * 255, pix.reshape(5, 12))
    np.testing.assert_array_equal(ds.labels, lab)


# ---------------------------------------------------------------- CSV


def test_csv_basic(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,0.5,0.25\n0,0.1,0.9\n")
    ds = load_csv(p, 0, 2)
    np.testing.assert_array_equal(ds.inputs, [[0.5, 0.25], [0.1, 0.9]])
    np.testing.assert_array_equal(ds.labels, [1, 0])


def test_csv_header_and_crlf(tmp_path):
    p = tmp_path / "d.csv"
    p.write_bytes(b"y,a,b\r\n1,0.5,0.25\r\n0,0.1,0.9\r\n")
    ds = load_csv(p, 0, 2)
    assert ds.n == 2 and ds.d == 2


def test_csv_label_in_other_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("0.5,2,0.25\n0.1,0,0.9\n")
    ds = load_csv(p, 1)
    np.testing.assert_array_equal(ds.inputs, [[0.5, 0.25], [0.1, 0.9]])
    assert ds.classes == 3


@pytest.mark.parametrize(
    "text, where",
    [
        ("1,0.5\n5,0.1\n", "line 2"),  # label out of range
        ("1,0.5\n0,0.1,3\n", "line 2"),  # ragged
        ("1,0.5\n0,abc\n", "line 2"),  # non-numeric
        ("1,0.5\n0.5,0.1\n", "line 2"),  # fractional label
        ("y,a\n1,0.5\n0,x\n", "line 3"),
    ],
)
def test_csv_errors_name_line(tmp_path, text, where):
    p = tmp_path / "d.csv"
    p.write_text(text)
    with pytest.raises(DataFormatError, match=where):
        load_csv(p, 0, 2)


def test_csv_empty(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("y,a\n")
    with pytest.raises(DataFormatError, match="no data"):
        load_csv(p, 0, 2)


@given(
    st.integers(1, 20),
    st.integers(1, 6),
    st.integers(0, 6),
    st.booleans(),
    st.integers(0, 2**32 - 1),
)
@settings(max_examples=40, deadline=None)
def test_csv_round_trip(tmp_path_factory, n, d, col, header, seed):
    col = min(col, d)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d)) * 10.0 ** rng.integers(-300, 300, (n, d))
    ds = Dataset(x, rng.integers(0, 3, n), 3)
    p = tmp_path_factory.mktemp("csv") / "rt.csv"
    write_csv(ds, p, label_column=col, header=header)
    back = load_csv(p, col, 3)
    assert back.inputs.tobytes() == ds.inputs.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)


# ---------------------------------------------------------------- synthetic


def test_synthetic_deterministic():
    a, b = synthetic(3, 50, 4, 3), synthetic(3, 50, 4, 3)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert synthetic(4, 50, 4, 3).inputs.tobytes() != a.inputs.tobytes()


def test_synthetic_covers_classes():
    ds = synthetic(0, 1000, 8, 4)
    assert min(ds.histogram()) > 0
    assert sum(ds.histogram()) == 1000


@pytest.mark.parametrize("d, classes", [(8, 4), (3, 7), (1, 3)])
def test_synthetic_noise_free_is_linearly_separable(d, classes):
    ds = synthetic(1, 500, d, classes, sigma=0.0)
    # nearest-center rule, which is linear: score_k(x) = c_k.x - |c_k|^2 / 2
    centers = np.array([ds.inputs[ds.labels == k][0] for k in range(classes)])
    scores = ds.inputs @ centers.T - 0.5 * (centers**2).sum(axis=1)
    assert np.mean(scores.argmax(axis=1) == ds.labels) == 1.0


def test_dataset_validation():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int), 2)
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 2)), np.array([0, 0]), 1)


def test_one_hot():
    np.testing.assert_array_equal(one_hot(np.array([2, 0]), 3), [[0, 0, 1], [1, 0, 0]])


# ---------------------------------------------------------------- partitioning


def test_shard_n10_p4():
    ranges = [shard(10, r, 4) for r in range(4)]
    assert [len(r) for r in ranges] == [3, 3, 2, 2]
    assert [(r.start, r.stop) for r in ranges] == [(0, 3), (3, 6), (6, 8), (8, 10)]


def test_shard_single_rank():
    assert shard(synthetic(0, 17, 2, 2), 0, 1) == range(17)


def test_shard_bad_rank():
    with pytest.raises(ValueError):
        shard(10, 4, 4)


@given(st.integers(0, 1000), st.integers(1, 16))
@settings(max_examples=300, deadline=None)
def test_shard_partition(n, p):
    ranges = [shard(n, r, p) for r in range(p)]
    assert [i for r in ranges for i in r] == list(range(n))
    sizes = [len(r) for r in ranges]
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)


def test_batch_slice_examples():
    slices = [batch_slice(100, 8, 0, r, 4) for r in range(4)]
    assert [len(s) for s in slices] == [2, 2, 2, 2]
    assert np.concatenate([s.indices for s in slices]).tolist() == list(range(8))
    assert global_batch(100, 8, 13)[0] == 4
    sizes = [len(batch_slice(100, 5, 0, r, 4)) for r in range(4)]
    assert sizes == [2, 1, 1, 1]


def test_window_wraps_around():
    np.testing.assert_array_equal(global_batch(10, 4, 2), [8, 9, 0, 1])
    np.testing.assert_array_equal(global_batch(3, 7, 0), [0, 1, 2, 0, 1, 2, 0])


def test_more_ranks_than_batch_gives_empty_slices():
    slices = [batch_slice(50, 3, 1, r, 5) for r in range(5)]
    assert [len(s) for s in slices] == [1, 1, 1, 0, 0]
    assert slices[4].indices.size == 0


def test_shuffled_batches_cover_each_epoch_once():
    n, b = 37, 5
    seen = np.concatenate([global_batch(n, b, s, shuffle_seed=9) for s in range(n)])
    # n steps of b items = b full epochs, each a permutation of range(n)
    for e in range(b):
        assert sorted(seen[e * n:(e + 1) * n]) == list(range(n))
    assert not np.array_equal(seen[:n], np.arange(n))
    np.testing.assert_array_equal(global_batch(n, b, 3, 9), global_batch(n, b, 3, 9))


@given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 50), st.integers(1, 16),
       st.one_of(st.none(), st.integers(0, 1000)))
@settings(max_examples=200, deadline=None)
def test_batch_slices_partition_window(n, b, step, p, seed):
    window = global_batch(n, b, step, seed)
    parts = [batch_slice(n, b, step, r, p, seed) for r in range(p)]
    np.testing.assert_array_equal(np.concatenate([s.indices for s in parts]), window)
    sizes = [len(s) for s in parts]
    assert max(sizes) - min(sizes) <= 1
