import struct

import numpy as np
import pytest

from p4net.data import (LabeledDataset, generate_synthetic, load_dataset, partition_alpha_based,
                        partition_shard_based, permute_labels, read_idx, split_train_test)
from p4net.errors import ParameterError, ParseError
from p4net.features import fit_normalizer, normalize, scatter_batch
from p4net.models import LinearClassifier, batch_grad, evaluate
from p4net.numerics import RandomSource


def write_idx(path, array, code=0x08):
    array = np.asarray(array)
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path.write_bytes(header + array.astype(array.dtype.newbyteorder(">")).tobytes())


def test_idx_fixture(tmp_path):
    imgs = np.arange(4 * 28 * 28, dtype=np.uint8).reshape(4, 28, 28)
    write_idx(tmp_path / "train-images-idx3-ubyte", imgs)
    write_idx(tmp_path / "train-labels-idx1-ubyte", np.array([0, 1, 2, 1], dtype=np.uint8))
    ds = load_dataset(tmp_path / "train-images-idx3-ubyte")
    assert len(ds) == 4 and ds.image_shape == (1, 28, 28)
    np.testing.assert_array_equal(ds.labels, [0, 1, 2, 1])
    assert ds.num_classes == 3
    assert ds.images[0, 0, 0, 1] == pytest.approx(1 / 255)


def test_idx_errors_carry_offsets(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"\x01\x00")
    with pytest.raises(ParseError) as err:
        read_idx(p)
    assert err.value.field == "magic"
    good = tmp_path / "x-images-idx3"
    write_idx(good, np.zeros((2, 4, 4), dtype=np.uint8))
    good.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(ParseError) as err:
        read_idx(good)
    assert err.value.offset == 16


def test_csv_fixture(tmp_path):
    p = tmp_path / "d.csv"
    header = "label," + ",".join(f"p{k}" for k in range(784))
    rows = [f"{k}," + ",".join(str((k * 7 + j) % 256) for j in range(784)) for k in range(3)]
    p.write_text("\n".join([header, *rows]) + "\n")
    ds = load_dataset(p, "csv")
    assert ds.images.shape == (3, 1, 28, 28)
    np.testing.assert_array_equal(ds.labels, [0, 1, 2])
    assert ds.images[1, 0, 0, 0] == pytest.approx(7 / 255)


def test_csv_rgb_and_errors(tmp_path):
    p = tmp_path / "rgb.csv"
    header = "label," + ",".join(f"p{k}" for k in range(3 * 16))
    p.write_text(header + "\n1," + ",".join(["0"] * 48) + "\n")
    assert load_dataset(p, "csv").images.shape == (1, 3, 4, 4)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ParseError):
        load_dataset(empty, "csv")
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("label,p0,p1,p2,p3\n0,1,2\n")
    with pytest.raises(ParseError) as err:
        load_dataset(ragged, "csv")
    assert err.value.offset == len("label,p0,p1,p2,p3\n")


def _linear_accuracy(ds, n_train):
    f = scatter_batch(ds.images)
    x = normalize(f, fit_normalizer(f[:n_train])).reshape(len(f), -1)
    m = LinearClassifier.zeros(ds.num_classes, x.shape[1])
    for _ in range(300):
        _, g = batch_grad(m, x[:n_train], ds.labels[:n_train])
        m = m.with_flat(m.flat() - 0.5 * g)
    return evaluate(m, x[n_train:], ds.labels[n_train:])


def test_synthetic_separation_controls_difficulty():
    assert _linear_accuracy(generate_synthetic(4, 250, 8, 30.0, 0), 800) > 0.95
    assert abs(_linear_accuracy(generate_synthetic(4, 250, 8, 0.0, 0), 800) - 0.25) < 0.1


def test_synthetic_deterministic_and_bounded():
    a, b = generate_synthetic(3, 10, 8, 5.0, 4), generate_synthetic(3, 10, 8, 5.0, 4)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.images.min() >= 0 and a.images.max() <= 1
    np.testing.assert_array_equal(a.label_histogram(), [10, 10, 10])


def _toy(num_classes=10, per_class=40):
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(np.zeros((len(labels), 1, 4, 4)), labels, num_classes)


def test_shard_partition_counts():
    ds = _toy()
    shards = partition_shard_based(ds, 2, 2, seed=0)
    assert len(shards) == 10
    for sh in shards:
        assert len(set(sh.train.labels) | set(sh.test.labels)) == 2
        assert sh.meta["classes"] == sorted(set(sh.train.labels) | set(sh.test.labels))
    used = np.concatenate([sh.indices for sh in shards])
    assert len(used) == len(set(used)) == len(ds)


def test_shard_partition_iid_limit_and_divisibility():
    ds = _toy(4, 40)
    for sh in partition_shard_based(ds, 4, 4, seed=1):
        assert sh.meta["classes"] == [0, 1, 2, 3]
    with pytest.raises(ParameterError):
        partition_shard_based(_toy(5, 10), 1, 2, seed=0)


def test_alpha_partition_mix():
    ds = _toy(4, 400)
    shards = partition_alpha_based(ds, 0.5, 6, 200, seed=0)
    for i, sh in enumerate(shards):
        assert sh.meta["iid_count"] == 100 and sh.meta["dedicated_count"] == 100
        assert len(sh.indices) == 200
        labels = np.concatenate([sh.train.labels, sh.test.labels])
        assert (labels == i % 4).sum() >= 100
    used = np.concatenate([sh.indices for sh in shards])
    assert len(set(used)) == len(used)


def test_alpha_partition_boundaries():
    ds = _toy(4, 200)
    for i, sh in enumerate(partition_alpha_based(ds, 0.0, 4, 50, seed=2)):
        assert set(sh.train.labels) | set(sh.test.labels) == {i % 4}
    iid = partition_alpha_based(ds, 1.0, 4, 100, seed=2)
    assert all(sh.meta["dedicated_count"] == 0 for sh in iid)
    assert all(len(set(sh.train.labels)) > 1 for sh in iid)


@pytest.mark.parametrize("n, tr, te", [(300, 240, 60), (200, 160, 40)])
def test_split_sizes(n, tr, te):
    a, b = split_train_test(np.arange(n), RandomSource(0))
    assert (len(a), len(b)) == (tr, te)
    assert not set(a) & set(b) and set(a) | set(b) == set(range(n))


def test_split_needs_five():
    with pytest.raises(ParameterError):
        split_train_test(np.arange(4), RandomSource(0))


def test_permute_labels():
    ds = _toy(3, 2)
    np.testing.assert_array_equal(permute_labels(ds, [1, 2, 0]).labels, [1, 1, 2, 2, 0, 0])
    with pytest.raises(ParameterError):
        permute_labels(ds, [0, 0, 1])
