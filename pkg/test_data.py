"""
Dataset reader, synthetic data and batch iterator tests.
All files are generated under tmp_path; no real dataset is needed.
"""
import gzip
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bnplab.data import (
    MNIST_FILES,
    BatchIterator,
    Dataset,
    batches,
    load_cifar10,
    load_cifar10_bin,
    load_dataset_cache,
    load_datasets,
    load_idx,
    load_mnist,
    save_dataset_cache,
    synth_illconditioned,
    to_channel_first,
    to_channel_last,
    train_test_split,
)
from bnplab.errors import BatchSizeError, DataFormatError, ShapeError
from bnplab.linalg import make_rng


def _idx_bytes(magic, dims, payload):
    header = struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims)
    return header + np.asarray(payload, dtype=np.uint8).tobytes()


def _write_mnist(directory, n_train=3, n_test=2, compress=False):
    rng = make_rng(0)
    contents = {
        "train_images": _idx_bytes(0x803, (n_train, 28, 28), rng.integers(0, 256, n_train * 784)),
        "train_labels": _idx_bytes(0x801, (n_train,), rng.integers(0, 10, n_train)),
        "test_images": _idx_bytes(0x803, (n_test, 28, 28), rng.integers(0, 256, n_test * 784)),
        "test_labels": _idx_bytes(0x801, (n_test,), rng.integers(0, 10, n_test)),
    }
    for key, data in contents.items():
        if compress:
            with gzip.open(directory / (MNIST_FILES[key] + ".gz"), "wb") as f:
                f.write(data)
        else:
            (directory / MNIST_FILES[key]).write_bytes(data)


def test_load_idx_images_and_labels(tmp_path):
    images = tmp_path / "img"
    images.write_bytes(_idx_bytes(0x803, (2, 2, 3), [0, 255, 51, 0, 0, 0, 102, 0, 0, 0, 0, 255]))
    x = load_idx(str(images))
    assert x.shape == (2, 2, 3) and x.dtype == np.float64
    assert_allclose(x[0, 0], [0.0, 1.0, 0.2])
    assert x[1, 1, 2] == 1.0

    labels = tmp_path / "lbl"
    labels.write_bytes(_idx_bytes(0x801, (3,), [7, 0, 9]))
    assert_array_equal(load_idx(str(labels)), [7, 0, 9])


def test_load_idx_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(_idx_bytes(0x802, (1,), [0]))
    with pytest.raises(DataFormatError, match="offset 0") as info:
        load_idx(str(path))
    assert info.value.offset == 0


def test_load_idx_truncated_payload(tmp_path):
    path = tmp_path / "short"
    data = _idx_bytes(0x803, (2, 2, 2), [1, 2, 3])
    path.write_bytes(data)
    with pytest.raises(DataFormatError) as info:
        load_idx(str(path))
    assert info.value.offset == len(data)


def test_load_mnist_subsets(tmp_path):
    _write_mnist(tmp_path, compress=True)
    train, test = load_mnist(str(tmp_path), train_subset=2, test_subset=1)
    assert train.inputs.shape == (2, 28, 28) and len(test) == 1
    full_train, _ = load_mnist(str(tmp_path), full=True)
    assert len(full_train) == 3


def test_load_mnist_missing_file(tmp_path):
    with pytest.raises(DataFormatError, match="not found"):
        load_mnist(str(tmp_path))


def _cifar_record(label, fill):
    planes = np.zeros((3, 32, 32), dtype=np.uint8)
    planes[0, 0, 1] = fill
    planes[2, 31, 0] = 255
    return bytes([label]) + planes.tobytes()


def test_cifar_record_layout_is_channel_last(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(_cifar_record(3, 51) + _cifar_record(9, 102))
    dataset = load_cifar10_bin(str(path))
    assert dataset.inputs.shape == (2, 32, 32, 3)
    assert_array_equal(dataset.labels, [3, 9])
    assert dataset.inputs[0, 0, 1, 0] == pytest.approx(0.2)
    assert dataset.inputs[1, 31, 0, 2] == 1.0
    assert dataset.inputs[1, 0, 1, 1] == 0.0


def test_cifar_size_and_label_errors(tmp_path):
    path = tmp_path / "odd.bin"
    path.write_bytes(_cifar_record(1, 0) + b"\x00" * 10)
    with pytest.raises(DataFormatError) as info:
        load_cifar10_bin(str(path))
    assert info.value.offset == 3073

    path.write_bytes(_cifar_record(1, 0) + _cifar_record(12, 0))
    with pytest.raises(DataFormatError, match="label 12") as info:
        load_cifar10_bin(str(path))
    assert info.value.offset == 3073


def test_load_cifar10_nested_directory(tmp_path):
    nested = tmp_path / "cifar-10-batches-bin"
    nested.mkdir()
    (nested / "data_batch_1.bin").write_bytes(b"".join(_cifar_record(i % 10, i) for i in range(4)))
    (nested / "test_batch.bin").write_bytes(_cifar_record(5, 0))
    train, test = load_cifar10(str(tmp_path), train_subset=3, test_subset=5)
    assert len(train) == 3 and len(test) == 1
    with pytest.raises(DataFormatError, match="not found"):
        load_cifar10(str(tmp_path), full=True)


def test_channel_converters_are_inverse():
    x = make_rng(1).standard_normal((2, 3, 4, 5))
    assert to_channel_last(x).shape == (2, 4, 5, 3)
    assert_array_equal(to_channel_first(to_channel_last(x)), x)


def test_dataset_validation():
    with pytest.raises(ShapeError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int), 2)
    with pytest.raises(ShapeError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)


def test_synth_feature_scales_span_requested_decades():
    data = synth_illconditioned(n_features=20, N=4000, scale_decades=3.0, seed=0)
    stds = data.inputs.std(axis=0)
    assert 10 ** 2.8 <= stds.max() / stds.min() <= 10 ** 3.2
    assert set(np.unique(data.labels)) == {0, 1}
    again = synth_illconditioned(n_features=20, N=4000, scale_decades=3.0, seed=0)
    assert_array_equal(data.inputs, again.inputs)


def test_synth_rejects_negative_decades():
    with pytest.raises(ShapeError):
        synth_illconditioned(4, 10, -1.0, 0)


def test_train_test_split_fraction():
    train, test = train_test_split(synth_illconditioned(4, 100, 1.0, 0))
    assert (len(train), len(test)) == (80, 20)


def _toy(n=10):
    return Dataset(np.arange(n, dtype=np.float64)[:, None], np.zeros(n, dtype=np.int64), 1)


def test_batches_cover_every_sample_once():
    dataset = _toy(10)
    epoch = batches(dataset, 3, seed=4)
    assert [len(x) for x, _ in epoch] == [3, 3, 3, 1]
    seen = np.concatenate([x[:, 0] for x, _ in epoch])
    assert_array_equal(np.sort(seen), np.arange(10.0))


def test_batch_order_depends_on_seed_and_epoch_only():
    iterator = BatchIterator(_toy(50), 5, seed=1)
    assert_array_equal(iterator.order(0), BatchIterator(_toy(50), 7, seed=1).order(0))
    assert not np.array_equal(iterator.order(0), iterator.order(1))
    assert not np.array_equal(iterator.order(0), BatchIterator(_toy(50), 5, seed=2).order(0))


def test_batch_iterator_drop_last_and_limits():
    iterator = BatchIterator(_toy(10), 3, drop_last=True)
    assert len(iterator) == 3
    assert [len(x) for x, _ in iterator.epoch(0)] == [3, 3, 3]
    with pytest.raises(BatchSizeError):
        BatchIterator(_toy(10), 0)
    with pytest.raises(BatchSizeError):
        BatchIterator(_toy(10), 11)


def test_dataset_cache_round_trip(tmp_path):
    dataset = synth_illconditioned(3, 8, 1.0, 0)
    restored = load_dataset_cache(save_dataset_cache(str(tmp_path / "cache"), dataset))
    assert_array_equal(restored.inputs, dataset.inputs)
    assert_array_equal(restored.labels, dataset.labels)
    assert restored.num_classes == 2


def test_load_datasets_uses_cache(tmp_path):
    raw, cache = tmp_path / "raw", tmp_path / "cache"
    raw.mkdir()
    _write_mnist(raw)
    first, _ = load_datasets("mnist", str(raw), train_subset=2, test_subset=1, cache_dir=str(cache))
    for path in raw.iterdir():
        path.unlink()
    second, _ = load_datasets("mnist", str(raw), train_subset=2, test_subset=1, cache_dir=str(cache))
    assert_array_equal(first.inputs, second.inputs)


def test_load_datasets_unknown_name():
    with pytest.raises(DataFormatError):
        load_datasets("imagenet", "data")
