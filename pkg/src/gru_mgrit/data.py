"""Labeled sequence sets: synthetic generation and the CSV exchange format.

CSV layout (UTF-8, comma separated, '.' decimal point)::

    seq_id,t,f1,...,fd,label
    0,0,0.125,...,-1.5,3
    0,1,...

One row per (sequence, time index). Rows of a sequence may appear in any
order but their time indices must be exactly 0..n-1, and the label must be
the same integer on every row of the sequence.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError
from .grid import padded_length


@dataclass
class LabeledSequenceSet:
    """``X[i, :lengths[i]]`` is sequence i; rows beyond its length are zero padding."""

    X: np.ndarray          # (n, T, d)
    lengths: np.ndarray    # (n,)
    labels: np.ndarray     # (n,)
    num_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.X.ndim != 3:
            raise ValueError(f"X must be (n, T, d), got {self.X.shape}")
        n, T, _ = self.X.shape
        if self.lengths.shape != (n,) or self.labels.shape != (n,):
            raise ValueError("lengths and labels must have one entry per sequence")
        if n and (self.lengths.min() < 1 or self.lengths.max() > T):
            raise ValueError("sequence lengths must lie in 1..T")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def dim(self) -> int:
        return self.X.shape[2]

    def subset(self, idx) -> "LabeledSequenceSet":
        idx = np.asarray(idx)
        return LabeledSequenceSet(self.X[idx], self.lengths[idx], self.labels[idx], self.num_classes)

    def padded(self, T: int) -> "LabeledSequenceSet":
        if T < self.T:
            raise ValueError(f"cannot pad length {self.T} down to {T}")
        X = np.zeros((len(self), T, self.dim))
        X[:, : self.T] = self.X
        return LabeledSequenceSet(X, self.lengths, self.labels, self.num_classes)

    def pad_to_grid(self, c_f: int, levels: int) -> "LabeledSequenceSet":
        """Zero-pad to the next multiple of c_f**(levels-1)."""
        return self.padded(padded_length(self.T, c_f, levels))

    def mask(self) -> np.ndarray:
        return np.arange(self.T)[None, :] < self.lengths[:, None]

    def batch(self, idx):
        """Time-major inputs (T+1, B, d) with a zero anchor row, plus lengths and labels."""
        idx = np.asarray(idx)
        x = np.zeros((self.T + 1, len(idx), self.dim))
        x[1:] = self.X[idx].transpose(1, 0, 2)
        return x, self.lengths[idx], self.labels[idx]


# -- standardization ------------------------------------------------------------

def channel_stats(ds: LabeledSequenceSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over unpadded entries."""
    vals = ds.X[ds.mask()]
    mean = vals.mean(axis=0)
    std = vals.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def standardize(ds: LabeledSequenceSet, mean, std) -> LabeledSequenceSet:
    m = ds.mask()[..., None]
    X = np.where(m, (ds.X - mean) / std, 0.0)
    return LabeledSequenceSet(X, ds.lengths, ds.labels, ds.num_classes)


# -- synthetic task ---------------------------------------------------------------

def synth_generate(num_classes: int, T: int, dim: int, n_per_class: int, seed: int,
                   noise: float = 1.5) -> LabeledSequenceSet:
    """Noisy multichannel sinusoids with a class-specific frequency/phase signature.

    Class k, channel j emits sin(2 pi f_kj t / T + phi_kj) with f_kj in [1, 8)
    cycles per sequence. Each sample adds i.i.d. Gaussian noise of standard
    deviation ``noise``; with ``noise=0`` all samples of a class coincide.
    """
    if min(num_classes, T, dim, n_per_class) < 1:
        raise ValueError("num_classes, T, dim and n_per_class must be positive")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    freq = rng.uniform(1.0, 8.0, size=(num_classes, dim))
    phase = rng.uniform(0.0, 2 * np.pi, size=(num_classes, dim))
    t = np.arange(T)[:, None]
    clean = np.stack([np.sin(2 * np.pi * freq[k] * t / T + phase[k]) for k in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    X = clean[labels] + noise * rng.standard_normal((labels.size, T, dim))
    return LabeledSequenceSet(X, np.full(labels.size, T), labels, num_classes)


def train_test_split(ds: LabeledSequenceSet, n_test: int, seed: int):
    """Random split with ``n_test`` held out (shuffled by ``seed``)."""
    if not 0 < n_test < len(ds):
        raise ValueError(f"n_test must lie in 1..{len(ds) - 1}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# -- CSV ----------------------------------------------------------------------------

def write_csv(path, ds: LabeledSequenceSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_id", "t"] + [f"f{j + 1}" for j in range(ds.dim)] + ["label"])
        for i in range(len(ds)):
            lab = int(ds.labels[i])
            for t in range(int(ds.lengths[i])):
                w.writerow([i, t] + [repr(float(v)) for v in ds.X[i, t]] + [lab])


def _int_field(text: str, what: str, line: int) -> int:
    try:
        v = float(text)
    except ValueError:
        raise DataFormatError(f"{what} {text!r} is not a number", line) from None
    if not np.isfinite(v) or v != int(v):
        raise DataFormatError(f"{what} {text!r} is not an integer", line)
    return int(v)


def load_csv(path, num_classes: int | None = None) -> LabeledSequenceSet:
    """Read the CSV layout above; sequences are padded to the longest one."""
    seqs: dict[int, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError("empty file", 1)
        if len(header) < 4:
            raise DataFormatError("header needs seq_id, t, at least one feature and label", 1)
        d = len(header) - 3
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != d + 3:
                raise DataFormatError(
                    f"expected {d} features ({d + 3} fields), got {len(row) - 3} features", line)
            sid = _int_field(row[0], "sequence id", line)
            t = _int_field(row[1], "time index", line)
            label = _int_field(row[-1], "label", line)
            try:
                feats = [float(v) for v in row[2:-1]]
            except ValueError:
                raise DataFormatError("non-numeric feature value", line) from None
            if not all(np.isfinite(feats)):
                raise DataFormatError("non-finite feature value", line)
            s = seqs.setdefault(sid, {"label": label, "rows": {}, "line": line})
            if label != s["label"]:
                raise DataFormatError(f"label {label} differs from {s['label']} earlier in "
                                      f"sequence {sid}", line)
            if t in s["rows"]:
                raise DataFormatError(f"duplicate time index {t} in sequence {sid}", line)
            s["rows"][t] = (feats, line)
    if not seqs:
        raise DataFormatError("no data rows", 2)
    ids = sorted(seqs)
    T = 0
    for sid in ids:
        rows = seqs[sid]["rows"]
        n = len(rows)
        for t in sorted(rows):
            if t < 0 or t >= n:
                missing = min(set(range(n)) - set(rows)) if t >= n else t
                raise DataFormatError(f"sequence {sid} is missing time index {missing}",
                                      rows[t][1])
        T = max(T, n)
    X = np.zeros((len(ids), T, d))
    lengths = np.zeros(len(ids), dtype=np.int64)
    labels = np.zeros(len(ids), dtype=np.int64)
    for i, sid in enumerate(ids):
        rows = seqs[sid]["rows"]
        lengths[i] = len(rows)
        labels[i] = seqs[sid]["label"]
        for t, (feats, _) in rows.items():
            X[i, t] = feats
    if labels.min() < 0:
        bad = ids[int(np.argmin(labels))]
        raise DataFormatError(f"negative label in sequence {bad}", seqs[bad]["line"])
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.max() >= k:
        bad = ids[int(np.argmax(labels))]
        raise DataFormatError(f"label {labels.max()} outside [0, {k})", seqs[bad]["line"])
    return LabeledSequenceSet(X, lengths, labels, k)
