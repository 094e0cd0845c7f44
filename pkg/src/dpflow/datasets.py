"""Data readers (IDX/MNIST, CSV, synthetic) and deterministic batch partitioning.

Every rank loads the full dataset and then takes its slice of each step's
global batch, so the union of per-rank slices is exactly the batch a
single-rank run would see.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray  # [n, d] float64
    labels: np.ndarray  # [n] int64
    classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise DataFormatError(f"inputs must be [n, d], got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DataFormatError(
                f"{self.inputs.shape[0]} input rows but {self.labels.shape[0]} labels"
            )
        if self.classes < 2:
            raise DataFormatError(f"need at least 2 classes, got {self.classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataFormatError(f"labels must lie in [0, {self.classes})")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def histogram(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.classes).tolist()


def one_hot(labels: np.ndarray, classes: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((len(labels), classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


# ---------------------------------------------------------------- IDX


def _idx_header(buf: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < 4:
        raise DataFormatError(f"{path}: truncated at offset {len(buf)}, no magic number")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    if len(buf) < need:
        raise DataFormatError(f"{path}: truncated header at offset {len(buf)}, need {need} bytes")
    return struct.unpack_from(f">{ndim}I", buf, 4)


def _idx_body(buf: bytes, path, offset: int, count: int) -> np.ndarray:
    if len(buf) < offset + count:
        raise DataFormatError(
            f"{path}: truncated at offset {len(buf)}, expected {offset + count} bytes"
        )
    if len(buf) > offset + count:
        raise DataFormatError(f"{path}: {len(buf) - offset - count} trailing bytes after offset {offset + count}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=offset)


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    """MNIST-style IDX pair; pixels scaled to [0, 1] and flattened row-major."""
    img = Path(images_path).read_bytes()
    n, rows, cols = _idx_header(img, images_path, IDX_IMAGES_MAGIC, 3)
    pixels = _idx_body(img, images_path, 16, n * rows * cols)

    lab = Path(labels_path).read_bytes()
    (n_labels,) = _idx_header(lab, labels_path, IDX_LABELS_MAGIC, 1)
    if n_labels != n:
        raise DataFormatError(
            f"{labels_path}: label count {n_labels} at offset 4 does not match {n} images"
        )
    labels = _idx_body(lab, labels_path, 8, n).astype(np.int64)
    if n and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise DataFormatError(f"{labels_path}: label {labels[bad]} at offset {8 + bad} >= {classes}")
    inputs = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(inputs, labels, classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images [n, rows, cols] and labels [n] as an IDX pair."""
    pixels = np.asarray(images, dtype=np.uint8)
    n, rows, cols = pixels.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------- CSV


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv(path, label_column: int, classes: int | None = None) -> Dataset:
    """Rectangular numeric CSV; a first row whose first field is not numeric is a header.

    ``classes=None`` infers ``max(label) + 1`` (at least 2).
    """
    limit = classes if classes is not None else float("inf")
    rows = []
    labels = []
    width = None
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and not _is_number(row[0].strip()):
                continue
            if width is None:
                width = len(row)
                if not 0 <= label_column < width:
                    raise DataFormatError(f"{path}: line {lineno}: label column {label_column} out of range")
            elif len(row) != width:
                raise DataFormatError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: non-numeric cell in {row!r}") from None
            y = values.pop(label_column)
            if not (y.is_integer() and 0 <= y < limit):
                raise DataFormatError(f"{path}: line {lineno}: label {row[label_column]!r} not an integer in [0, {limit})")
            rows.append(values)
            labels.append(int(y))
    if width is None:
        raise DataFormatError(f"{path}: no data rows")
    inputs = np.array(rows, dtype=np.float64).reshape(len(rows), width - 1)
    if classes is None:
        classes = max(2, max(labels, default=0) + 1)
    return Dataset(inputs, np.array(labels, dtype=np.int64), classes)


def write_csv(dataset: Dataset, path, label_column: int = 0, header: bool = False) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if header:
            names = [f"x{i}" for i in range(dataset.d)]
            names.insert(label_column, "label")
            w.writerow(names)
        for x, y in zip(dataset.inputs, dataset.labels):
            cells = [format(v, ".17g") for v in x]
            cells.insert(label_column, str(int(y)))
            w.writerow(cells)


# ---------------------------------------------------------------- synthetic


def synthetic(seed: int, n: int, d: int, classes: int, sigma: float = 0.3, scale: float = 1.0) -> Dataset:
    """Gaussian blobs around class centers on scaled unit axes.

    Class ``k`` sits at ``scale * (1 + k // d) * e_(k mod d)``.
    """
    if n < 1 or d < 1 or classes < 2:
        raise ValueError("n and d must be positive and classes >= 2")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    centers = np.zeros((classes, d))
    k = np.arange(classes)
    centers[k, k % d] = scale * (1 + k // d)
    inputs = centers[labels] + sigma * rng.standard_normal((n, d))
    return Dataset(inputs, labels.astype(np.int64), classes)


# ---------------------------------------------------------------- partitioning


def shard_bounds(n: int, rank: int, p: int) -> tuple[int, int]:
    """Balanced contiguous split: the first ``n % p`` ranks get one extra item."""
    if not 0 <= rank < p:
        raise ValueError(f"rank {rank} outside [0, {p})")
    q, r = divmod(n, p)
    lo = rank * q + min(rank, r)
    return lo, lo + q + (rank < r)


def shard(dataset, rank: int, p: int) -> range:
    n = dataset if isinstance(dataset, int) else dataset.n
    return range(*shard_bounds(n, rank, p))


@dataclass(frozen=True)
class BatchSlice:
    step: int
    lo: int  # position range within the step's global batch window
    hi: int
    indices: np.ndarray  # dataset row indices for positions lo..hi

    def __len__(self):
        return self.hi - self.lo


def global_batch(n: int, batch: int, step: int, shuffle_seed: int | None = None) -> np.ndarray:
    """Dataset indices of step ``step``'s global batch, taken cyclically."""
    if batch < 1 or n < 1:
        raise ValueError("n and batch must be >= 1")
    t = step * batch + np.arange(batch)
    pos = t % n
    if shuffle_seed is None:
        return pos
    epochs = t // n
    out = np.empty(batch, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([shuffle_seed, int(e)]).permutation(n)
        mask = epochs == e
        out[mask] = perm[pos[mask]]
    return out


def batch_slice(n: int, batch: int, step: int, rank: int, p: int,
                shuffle_seed: int | None = None) -> BatchSlice:
    lo, hi = shard_bounds(batch, rank, p)
    window = global_batch(n, batch, step, shuffle_seed)
    return BatchSlice(step, lo, hi, window[lo:hi])

