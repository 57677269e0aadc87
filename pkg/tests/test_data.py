import os
import struct
from collections import Counter

import numpy as np
import pytest

from capsprune.data import (
    Dataset, SplitConfig, batches, load_cifar10, load_idx, resize_nearest, split, write_cifar10, write_idx,
)
from capsprune.errors import ConfigError, FormatError, LengthError

from conftest import MNIST_DIR

needs_mnist = pytest.mark.skipif(not os.path.exists(f"{MNIST_DIR}/train-labels-idx1-ubyte"),
                                 reason="MNIST IDX files not available")


def _write_idx_raw(path, magic, dims, payload):
    path.write_bytes(struct.pack(f">I{len(dims)}I", magic, *dims) + bytes(payload))


def test_idx_handcrafted_fixture(tmp_path):
    _write_idx_raw(tmp_path / "img", 0x803, (2, 2, 2), [0, 255, 128, 64, 1, 2, 3, 4])
    _write_idx_raw(tmp_path / "lab", 0x801, (2,), [7, 3])
    d = load_idx(tmp_path / "img", tmp_path / "lab")
    assert d.images.shape == (2, 1, 2, 2)
    assert d.images[0, 0].ravel().tolist() == [0.0, 1.0, 128 / 255, 64 / 255]
    assert d.images[0, 0, 1, 0] == pytest.approx(0.50196, abs=1e-5)
    assert d.labels.tolist() == [7, 3]


def test_idx_bad_magic(tmp_path):
    _write_idx_raw(tmp_path / "img", 0x802, (1, 1, 1), [0])
    _write_idx_raw(tmp_path / "lab", 0x801, (1,), [0])
    with pytest.raises(FormatError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_truncated(tmp_path):
    _write_idx_raw(tmp_path / "img", 0x803, (2, 2, 2), [0] * 7)
    _write_idx_raw(tmp_path / "lab", 0x801, (2,), [0, 1])
    with pytest.raises(LengthError):
        load_idx(tmp_path / "img", tmp_path / "lab")
    (tmp_path / "short").write_bytes(b"\x00\x00\x08\x03\x00")
    with pytest.raises(LengthError):
        load_idx(tmp_path / "short", tmp_path / "lab")


def _rand_dataset(rng, n, shape, classes=10):
    px = rng.integers(0, 256, size=(n, *shape))
    return Dataset(px / 255.0, rng.integers(0, classes, n), classes)


def test_idx_roundtrip_bit_exact(tmp_path, rng):
    d = _rand_dataset(rng, 5, (1, 4, 3))
    write_idx(d, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(back.images, d.images) and np.array_equal(back.labels, d.labels)
    write_idx(back, tmp_path / "i2", tmp_path / "l2")
    assert (tmp_path / "i").read_bytes() == (tmp_path / "i2").read_bytes()


def test_cifar_single_record(tmp_path):
    (tmp_path / "b.bin").write_bytes(bytes([7]) + bytes([255]) * 3072)
    d = load_cifar10(tmp_path / "b.bin")
    assert len(d) == 1 and d.labels.tolist() == [7]
    assert d.images.shape == (1, 3, 32, 32) and np.all(d.images == 1.0)


def test_cifar_empty_file(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"")
    d = load_cifar10(tmp_path / "e.bin")
    assert len(d) == 0 and d.images.shape == (0, 3, 32, 32)


def test_cifar_bad_length(tmp_path):
    (tmp_path / "x.bin").write_bytes(bytes(3074))
    with pytest.raises(FormatError):
        load_cifar10(tmp_path / "x.bin")


def test_cifar_roundtrip_and_planar_layout(tmp_path, rng):
    d = _rand_dataset(rng, 4, (3, 32, 32))
    write_cifar10(d, tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    # record 1: label then the R plane, G plane, B plane
    rec = raw[3073:2 * 3073]
    assert rec[0] == d.labels[1]
    assert rec[1 + 1024 + 5] == round(d.images[1, 1, 0, 5] * 255)
    back = load_cifar10([tmp_path / "c.bin"])
    assert np.array_equal(back.images, d.images) and np.array_equal(back.labels, d.labels)


def test_cifar_counts_match_record_walk(tmp_path, rng):
    d = _rand_dataset(rng, 50, (3, 32, 32))
    write_cifar10(d, tmp_path / "a.bin")
    write_cifar10(d.subset(range(20)), tmp_path / "b.bin")
    loaded = load_cifar10([tmp_path / "a.bin", tmp_path / "b.bin"])
    walk = Counter()
    for p in ("a.bin", "b.bin"):
        raw = (tmp_path / p).read_bytes()
        for off in range(0, len(raw), 3073):
            walk[raw[off]] += 1
    assert Counter(loaded.labels.tolist()) == walk


@needs_mnist
def test_full_mnist_train_histogram():
    d = load_idx(f"{MNIST_DIR}/train-images-idx3-ubyte", f"{MNIST_DIR}/train-labels-idx1-ubyte")
    assert d.images.shape == (60000, 1, 28, 28)
    assert d.images.min() >= 0 and d.images.max() <= 1
    with open(f"{MNIST_DIR}/train-labels-idx1-ubyte", "rb") as f:
        f.seek(8)
        scan = Counter(f.read())
    assert Counter(d.labels.tolist()) == scan
    published = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
    assert [scan[k] for k in range(10)] == published


def test_resize_nearest(rng):
    d = Dataset(np.arange(4.0).reshape(1, 1, 2, 2) / 4, np.array([0]), 1)
    up = resize_nearest(d, 4, 4)
    expected = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]) / 4
    assert np.array_equal(up.images[0, 0], expected)
    assert resize_nearest(d, 2, 2) is d


def test_resize_matches_index_map(rng):
    d = _rand_dataset(rng, 2, (3, 32, 32))
    big = resize_nearest(d, 64, 64)
    for y in range(64):
        for x in range(64):
            assert np.array_equal(big.images[:, :, y, x], d.images[:, :, (y * 32) // 64, (x * 32) // 64])
    assert set(np.unique(big.images)) == set(np.unique(d.images))


def test_split_fraction_and_disjoint(rng):
    d = _rand_dataset(rng, 100, (1, 2, 2))
    d = Dataset(d.images, np.arange(100) % 10, 10)
    tr, va = split(Dataset(np.arange(100.0).reshape(100, 1, 1, 1) / 100, d.labels, 10), SplitConfig(0.05, 3))
    assert (len(tr), len(va)) == (95, 5)
    ids_tr = set(np.rint(tr.images.ravel() * 100).astype(int))
    ids_va = set(np.rint(va.images.ravel() * 100).astype(int))
    assert not ids_tr & ids_va and len(ids_tr | ids_va) == 100
    tr0, va0 = split(d, SplitConfig(0.0, 0))
    assert len(va0) == 0 and len(tr0) == 100


def test_split_determinism():
    d = Dataset(np.arange(50.0).reshape(50, 1, 1, 1) / 50, np.zeros(50, int), 1)
    a = split(d, SplitConfig(0.2, 11))
    b = split(d, SplitConfig(0.2, 11))
    assert np.array_equal(a[1].images, b[1].images)
    perms = {tuple(np.rint(split(d, SplitConfig(0.2, s))[1].images.ravel() * 50).astype(int)) for s in range(10)}
    assert len(perms) == 10


def test_split_config_validation():
    with pytest.raises(ConfigError):
        SplitConfig(1.0)


def test_batches_sizes_and_order():
    d = Dataset(np.arange(5.0).reshape(5, 1, 1, 1), np.zeros(5, int), 1)
    got = list(batches(d, 2, shuffle=False))
    assert [len(y) for _, y in got] == [2, 2, 1]
    assert np.concatenate([x.ravel() for x, _ in got]).tolist() == [0, 1, 2, 3, 4]


@pytest.mark.parametrize("bs", [1, 3, 7, 64])
def test_batches_shuffle_coverage(bs):
    d = Dataset(np.arange(23.0).reshape(23, 1, 1, 1), np.zeros(23, int), 1)
    seen = np.concatenate([x.ravel() for x, _ in batches(d, bs, seed=5, shuffle=True)])
    assert sorted(seen.tolist()) == list(range(23))
    again = np.concatenate([x.ravel() for x, _ in batches(d, bs, seed=5, shuffle=True)])
    assert np.array_equal(seen, again)


def test_batches_bad_size():
    d = Dataset(np.zeros((1, 1, 1, 1)), np.zeros(1, int), 1)
    with pytest.raises(ConfigError):
        list(batches(d, 0))


def test_dataset_invariants():
    with pytest.raises(Exception):
        Dataset(np.zeros((2, 1, 1, 1)), np.array([0, 5]), 3)
