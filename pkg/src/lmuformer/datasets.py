"""Dataset ingestion: IDX image files, long-format CSV sequences, and
synthetic generators used by tests and the self-test command."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class SequenceDataset:
    """Sequences of shape (T, C) with integer labels.

    C is uniform across samples (enforced); T may vary, but stack() requires
    a uniform T and is what the training loop consumes.
    """

    sequences: list
    labels: np.ndarray
    num_classes: int
    split: str = ""
    permutation: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sequences) != len(self.labels):
            raise DataError("sequence/label count mismatch")
        if len(self.sequences) == 0:
            raise DataError("empty dataset")
        channels = {s.shape[1] for s in self.sequences}
        if len(channels) != 1:
            raise DataError(f"ragged channel counts: {sorted(channels)}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def channels(self) -> int:
        return self.sequences[0].shape[1]

    def stack(self) -> tuple[np.ndarray, np.ndarray]:
        lengths = {s.shape[0] for s in self.sequences}
        if len(lengths) != 1:
            raise DataError(f"ragged sequence lengths: cannot stack {sorted(lengths)}")
        X = np.stack(self.sequences).astype(numerics.default_dtype())
        return X, self.labels

    def subset(self, idx, split: str | None = None) -> "SequenceDataset":
        idx = np.asarray(idx)
        return SequenceDataset([self.sequences[i] for i in idx], self.labels[idx],
                               self.num_classes, split or self.split,
                               self.permutation)


def _read_idx(path, magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX header")
    header = np.frombuffer(raw[:8], dtype=">u4")
    got = int(header[0])
    if got != magic:
        raise DataError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    count = int(header[1])
    if magic == IDX_IMAGES_MAGIC:
        if len(raw) < 16:
            raise DataError(f"{path}: truncated IDX header")
        dims = np.frombuffer(raw[8:16], dtype=">u4")
        rows, cols = int(dims[0]), int(dims[1])
        body = np.frombuffer(raw[16:], dtype=np.uint8)
        if body.size != count * rows * cols:
            raise DataError(f"{path}: payload size mismatch")
        return body.reshape(count, rows, cols)
    body = np.frombuffer(raw[8:], dtype=np.uint8)
    if body.size != count:
        raise DataError(f"{path}: payload size mismatch")
    return body


def load_mnist_idx(images_path, labels_path, split: str = "") -> SequenceDataset:
    """Load one IDX image/label pair as flattened pixel sequences.

    Each H x W image becomes a (H*W, 1) sequence scaled to [0, 1].
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    n, h, w = images.shape
    dt = numerics.default_dtype()
    seqs = [np.ascontiguousarray(img.reshape(h * w, 1), dtype=dt) / dt(255.0)
            for img in images]
    return SequenceDataset(seqs, labels.astype(np.int64), num_classes=10, split=split)


def psmnist_splits(train_images, train_labels, test_images, test_labels,
                   permute_seed: int | None = 42):
    """50k/10k/10k pixel-sequence splits with one shared pixel permutation."""
    train_full = load_mnist_idx(train_images, train_labels, split="train")
    test = load_mnist_idx(test_images, test_labels, split="test")
    if len(train_full) < 60000:
        raise DataError(f"expected 60000 training images, got {len(train_full)}")
    train = train_full.subset(np.arange(50000), "train")
    val = train_full.subset(np.arange(50000, 60000), "val")
    if permute_seed is not None:
        train = permute(train, permute_seed)
        val = permute(val, permute_seed)
        test = permute(test, permute_seed)
    return train, val, test


def permutation_for(length: int, seed: int) -> np.ndarray:
    return numerics.RngSpec(seed).generator().permutation(length)


def permute(dataset: SequenceDataset, seed: int) -> SequenceDataset:
    """Apply one fixed seeded permutation of time positions to every sample."""
    T = dataset.sequences[0].shape[0]
    perm = permutation_for(T, seed)
    seqs = [s[perm] for s in dataset.sequences]
    return SequenceDataset(seqs, dataset.labels, dataset.num_classes,
                           dataset.split, permutation=perm)


def save_csv_sequences(data_path, labels_path, dataset: SequenceDataset) -> None:
    C = dataset.channels
    with open(data_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "t"] + [f"c_{c}" for c in range(C)])
        for i, seq in enumerate(dataset.sequences):
            for t in range(seq.shape[0]):
                writer.writerow([i, t] + [repr(float(v)) for v in seq[t]])
    with open(labels_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label"])
        for i, label in enumerate(dataset.labels):
            writer.writerow([i, int(label)])


def load_csv_sequences(data_path, labels_path, num_classes: int | None = None,
                       split: str = "") -> SequenceDataset:
    """Read long-format rows `sample_id,t,c_0..` plus a `sample_id,label` file.

    Row order is irrelevant (sorted by t per sample); duplicate or missing
    time steps, ragged channel counts, and missing labels are errors.
    """
    per_sample: dict = {}
    with open(data_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{data_path}: empty file")
        if header[:2] != ["sample_id", "t"]:
            raise DataError(f"{data_path}: expected header sample_id,t,c_0..")
        C = len(header) - 2
        if C < 1:
            raise DataError(f"{data_path}: no channel columns")
        for row in reader:
            if not row:
                continue
            if len(row) != 2 + C:
                raise DataError(f"{data_path}: ragged channel count at row {row!r}")
            sid, t = int(row[0]), int(row[1])
            per_sample.setdefault(sid, []).append(
                (t, [float(v) for v in row[2:]]))
    if not per_sample:
        raise DataError(f"{data_path}: no data rows")

    labels: dict = {}
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "label"]:
            raise DataError(f"{labels_path}: expected header sample_id,label")
        for row in reader:
            if not row:
                continue
            labels[int(row[0])] = int(row[1])

    dt = numerics.default_dtype()
    seqs, ys = [], []
    for sid in sorted(per_sample):
        if sid not in labels:
            raise DataError(f"sample {sid}: missing label")
        rows = sorted(per_sample[sid], key=lambda r: r[0])
        ts = [r[0] for r in rows]
        if ts != list(range(len(ts))):
            raise DataError(f"sample {sid}: time steps are not 0..T-1 "
                            "(duplicate or missing t)")
        seqs.append(np.asarray([r[1] for r in rows], dtype=dt))
        ys.append(labels[sid])
    k = num_classes if num_classes is not None else max(ys) + 1
    return SequenceDataset(seqs, np.asarray(ys), num_classes=k, split=split)


def toy_separable(n: int = 200, T: int = 32, channels: int = 4,
                  num_classes: int = 2, seed: int = 0,
                  margin: float = 2.0) -> SequenceDataset:
    """Linearly separable sequences: class k shifts every time step by a
    class-specific channel pattern, so even mean pooling separates them."""
    rng = numerics.RngSpec(seed).generator()
    dt = numerics.default_dtype()
    protos = rng.standard_normal((num_classes, channels))
    protos = margin * protos / np.linalg.norm(protos, axis=1, keepdims=True)
    labels = rng.integers(0, num_classes, size=n)
    noise = rng.standard_normal((n, T, channels)) * 0.3
    seqs = [(noise[i] + protos[labels[i]]).astype(dt) for i in range(n)]
    return SequenceDataset(seqs, labels, num_classes, split="toy")


def digits_sequences(seed: int = 0):
    """8x8 handwritten-digit images as 64-step pixel sequences (train/val/test).

    A small stand-in with the same shape contract as the pixel-MNIST pipeline,
    used where the full IDX files are not on disk.
    """
    from sklearn.datasets import load_digits

    bunch = load_digits()
    dt = numerics.default_dtype()
    seqs = [np.ascontiguousarray(img.reshape(64, 1), dtype=dt) / dt(16.0)
            for img in bunch.images]
    ds = SequenceDataset(seqs, bunch.target.astype(np.int64), num_classes=10,
                         split="digits")
    rng = numerics.RngSpec(seed).generator()
    order = rng.permutation(len(ds))
    n_train = int(0.7 * len(ds))
    n_val = int(0.15 * len(ds))
    return (ds.subset(order[:n_train], "train"),
            ds.subset(order[n_train:n_train + n_val], "val"),
            ds.subset(order[n_train + n_val:], "test"))
