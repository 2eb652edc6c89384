import numpy as np
import pytest

from gru_mgrit.data import (LabeledSequenceSet, channel_stats, load_csv, standardize,
                            synth_generate, train_test_split, write_csv)
from gru_mgrit.errors import DataFormatError


def test_generation_is_deterministic():
    a = synth_generate(6, 32, 4, 5, seed=11)
    b = synth_generate(6, 32, 4, 5, seed=11)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.labels, b.labels)
    c = synth_generate(6, 32, 4, 5, seed=12)
    assert not np.array_equal(a.X, c.X)


def test_class_balance():
    ds = synth_generate(6, 16, 3, 10, seed=0)
    assert len(ds) == 60
    assert np.array_equal(np.bincount(ds.labels), np.full(6, 10))
    assert ds.T == 16 and ds.dim == 3 and np.all(ds.lengths == 16)


def test_noise_free_classes_are_separable():
    """Nearest-centroid oracle on the clean signal."""
    ds = synth_generate(6, 64, 3, 8, seed=4, noise=0.0)
    for k in range(6):
        cls = ds.X[ds.labels == k]
        assert np.array_equal(cls, np.broadcast_to(cls[0], cls.shape))
    cent = np.stack([ds.X[ds.labels == k].mean(axis=0) for k in range(6)])
    d = ((ds.X[:, None] - cent[None]) ** 2).sum(axis=(2, 3))
    assert np.mean(np.argmin(d, axis=1) == ds.labels) == 1.0


def test_generation_rejects_bad_counts():
    with pytest.raises(ValueError):
        synth_generate(0, 16, 3, 10, seed=0)
    with pytest.raises(ValueError):
        synth_generate(2, 16, 3, 10, seed=0, noise=-1)


def test_train_test_split():
    ds = synth_generate(3, 8, 2, 10, seed=0)
    tr, te = train_test_split(ds, 6, seed=1)
    assert len(tr) == 24 and len(te) == 6
    rows = {tuple(r) for r in tr.X.reshape(24, -1)} | {tuple(r) for r in te.X.reshape(6, -1)}
    assert len(rows) == 30
    with pytest.raises(ValueError):
        train_test_split(ds, 30, seed=1)


def test_csv_round_trip(tmp_path):
    ds = synth_generate(4, 12, 3, 3, seed=9)
    ds = LabeledSequenceSet(ds.X * np.pi * 1e-3, ds.lengths, ds.labels, 4)
    path = tmp_path / "d.csv"
    write_csv(path, ds)
    back = load_csv(path)
    assert np.array_equal(back.X, ds.X)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.lengths, ds.lengths)
    assert back.num_classes == 4


def test_csv_ragged_lengths_are_padded(tmp_path):
    X = np.zeros((2, 5, 1))
    X[0, :3, 0] = [1, 2, 3]
    X[1, :, 0] = [4, 5, 6, 7, 8]
    ds = LabeledSequenceSet(X, [3, 5], [1, 0], 2)
    path = tmp_path / "r.csv"
    write_csv(path, ds)
    back = load_csv(path)
    assert back.T == 5 and list(back.lengths) == [3, 5]
    assert np.array_equal(back.X, X)


def write(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    return p


GOOD = "seq_id,t,f1,f2,label\n0,0,1.0,2.0,1\n0,1,1.5,2.5,1\n"


@pytest.mark.parametrize("extra,line,pattern", [
    ("0,2,1.0,1\n", 4, "expected 2 features"),
    ("0,2,1.0,2.0,1.5\n", 4, "not an integer"),
    ("0,2,1.0,abc,1\n", 4, "non-numeric"),
    ("0,2,1.0,nan,1\n", 4, "non-finite"),
    ("0,1,1.0,2.0,1\n", 4, "duplicate time index"),
    ("0,2,1.0,2.0,0\n", 4, "differs"),
    ("1,0,1.0,2.0,0\n1,2,1.0,2.0,0\n", 5, "missing time index 1"),
    ("x,0,1.0,2.0,0\n", 4, "sequence id"),
])
def test_malformed_rows_name_the_line(tmp_path, extra, line, pattern):
    with pytest.raises(DataFormatError, match=pattern) as info:
        load_csv(write(tmp_path, GOOD + extra))
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_label_range_checks(tmp_path):
    with pytest.raises(DataFormatError, match="negative"):
        load_csv(write(tmp_path, "seq_id,t,f1,label\n0,0,1.0,-1\n"))
    with pytest.raises(DataFormatError, match="outside"):
        load_csv(write(tmp_path, GOOD), num_classes=1)
    assert load_csv(write(tmp_path, GOOD), num_classes=6).num_classes == 6


def test_empty_files(tmp_path):
    with pytest.raises(DataFormatError):
        load_csv(write(tmp_path, ""))
    with pytest.raises(DataFormatError):
        load_csv(write(tmp_path, "seq_id,t,f1,label\n"))


def test_set_validation():
    with pytest.raises(ValueError):
        LabeledSequenceSet(np.zeros((2, 4)), [4, 4], [0, 0], 1)
    with pytest.raises(ValueError):
        LabeledSequenceSet(np.zeros((2, 4, 1)), [4, 5], [0, 0], 1)
    with pytest.raises(ValueError):
        LabeledSequenceSet(np.zeros((2, 4, 1)), [4, 4], [0, 2], 2)


def test_padding_and_batches():
    ds = synth_generate(2, 10, 3, 2, seed=0)
    p = ds.pad_to_grid(4, 3)
    assert p.T == 16 and np.all(p.X[:, 10:] == 0) and np.all(p.lengths == 10)
    x, lens, y = p.batch([3, 0])
    assert x.shape == (17, 2, 3)
    assert np.all(x[0] == 0)
    assert np.array_equal(x[1:, 0], p.X[3])
    assert list(y) == [p.labels[3], p.labels[0]]
    with pytest.raises(ValueError):
        p.padded(8)


def test_standardize_over_unpadded_entries():
    X = np.zeros((2, 4, 1))
    X[0, :2, 0] = [1.0, 3.0]
    X[1, :, 0] = [5.0, 5.0, 7.0, 7.0]
    ds = LabeledSequenceSet(X, [2, 4], [0, 1], 2)
    mean, std = channel_stats(ds)
    vals = np.array([1.0, 3.0, 5, 5, 7, 7])
    assert np.isclose(mean[0], vals.mean()) and np.isclose(std[0], vals.std())
    z = standardize(ds, mean, std)
    assert np.all(z.X[0, 2:] == 0)
    assert abs(z.X[z.mask()].mean()) < 1e-15 and abs(z.X[z.mask()].std() - 1) < 1e-15
    const = LabeledSequenceSet(np.ones((1, 3, 1)), [3], [0], 1)
    assert channel_stats(const)[1][0] == 1.0
