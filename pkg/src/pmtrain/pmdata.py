"""Training data as a persistent, per-row encrypted matrix.

Persistent layout::

    PmMatrix: rows | cols | classes | loaded | index_ptr     (u64 each)
    index:    rows x u64 pointers to row envelopes

Each row envelope holds ``features || one_hot_label`` as float32.  Rows are
loaded in transactions of ``batch_rows``.  While loading, the matrix hangs
off a separate root slot; it moves to the data slot only once complete, so
an interrupted load resumes at ``loaded`` instead of duplicating rows.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import envelope as env
from .nn import Batch
from .pm import DATA_LOADING_ROOT, DATA_ROOT, Heap, PmRef, pm_alloc, set_root, store_u64, transaction, txn_store

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
MATRIX_STRUCT = 40
_LOADED = 24
DEFAULT_BATCH_ROWS = 1024


class DatasetError(ValueError):
    pass


# -- on-disk formats -----------------------------------------------------


def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (MNIST images or labels)."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise DatasetError(f"{path}: too short for an IDX header")
    magic = struct.unpack_from(">I", data)[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DatasetError(f"{path}: unsupported IDX magic {magic:#010x}")
    ndim = magic & 0xFF
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    offset = 4 + 4 * ndim
    expected = int(np.prod(dims))
    if len(data) - offset != expected:
        raise DatasetError(f"{path}: expected {expected} payload bytes, found {len(data) - offset}")
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim not in (1, 3):
        raise DatasetError("IDX writer supports label vectors and image stacks only")
    magic = IDX_LABELS if array.ndim == 1 else IDX_IMAGES
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(array.tobytes())


def read_csv(path):
    """``label,p0,...,pN`` rows; a non-numeric first line is a header."""
    labels, pixels = [], []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            if i == 0 and not row[0].strip().isdigit():
                continue
            labels.append(int(row[0]))
            pixels.append([int(v) for v in row[1:]])
    if not labels:
        raise DatasetError(f"{path}: no rows")
    try:
        return np.array(pixels, dtype=np.uint8), np.array(labels, dtype=np.uint8)
    except ValueError as exc:
        raise DatasetError(f"{path}: ragged rows ({exc})") from None


@dataclass
class DatasetSource:
    images: str
    labels: Optional[str] = None
    format: str = "idx"
    rows: Optional[int] = None
    cols: Optional[int] = None
    classes: int = 10

    def read(self):
        """Return ``(pixels uint8 (rows, cols), labels uint8 (rows,))``."""
        if self.format == "idx":
            if self.labels is None:
                raise DatasetError("IDX source needs a labels file")
            images = read_idx(self.images)
            labels = read_idx(self.labels)
            pixels = images.reshape(len(images), -1)
        elif self.format == "csv":
            pixels, labels = read_csv(self.images)
        else:
            raise DatasetError(f"unknown dataset format {self.format!r}")
        if labels.ndim != 1 or len(labels) != len(pixels):
            raise DatasetError(f"{len(pixels)} images but {len(labels)} labels")
        if self.rows is not None and len(pixels) != self.rows:
            raise DatasetError(f"expected {self.rows} rows, found {len(pixels)}")
        if self.cols is not None and pixels.shape[1] != self.cols:
            raise DatasetError(f"expected {self.cols} columns, found {pixels.shape[1]}")
        if labels.size and int(labels.max()) >= self.classes:
            raise DatasetError(f"label {int(labels.max())} out of range for {self.classes} classes")
        return pixels, labels

    def normalized(self):
        pixels, labels = self.read()
        return pixels.astype(np.float32) / np.float32(255), labels.astype(np.int64)


# -- batch samplers ------------------------------------------------------


class BatchSampler:
    """Uniform sampling with replacement.  The whole state is the 64-bit
    ``cursor``, which is persisted alongside the model."""

    def __init__(self, cursor: int):
        self.cursor = int(cursor)

    def draw(self, rows: int, n: int) -> np.ndarray:
        g = np.random.default_rng(self.cursor)
        idx = g.integers(0, rows, size=n)
        self.cursor = int(g.integers(0, 2**63))
        return idx


class PermutationSampler(BatchSampler):
    """Sampling without replacement within one draw."""

    def draw(self, rows: int, n: int) -> np.ndarray:
        g = np.random.default_rng(self.cursor)
        idx = g.permutation(rows)[:n]
        self.cursor = int(g.integers(0, 2**63))
        return idx


# -- persistent matrix ---------------------------------------------------


class PmMatrix:
    def __init__(self, h: Heap, ref: PmRef):
        self.h = h
        self.ref = ref
        self.rows, self.cols, self.classes, _, index_ptr = struct.unpack(
            "<5Q", h._read(h.main_offset + ref.offset, MATRIX_STRUCT)
        )
        self.index_ref = h.deref(index_ptr, 8 * self.rows)
        self._index: Optional[np.ndarray] = None
        self.envelope_reads = 0

    @property
    def loaded(self) -> int:
        return struct.unpack("<Q", self.h._read(self.h.main_offset + self.ref.offset + _LOADED, 8))[0]

    @property
    def row_plaintext_len(self) -> int:
        return 4 * (self.cols + self.classes)

    @property
    def row_envelope_len(self) -> int:
        return self.row_plaintext_len + env.OVERHEAD

    def _row_ref(self, i: int) -> PmRef:
        if self._index is None or self._index[i] == 0:
            self._index = np.frombuffer(self.h.raw_read(self.index_ref), dtype="<u8")
        return self.h.deref(int(self._index[i]), self.row_envelope_len)

    def read_row(self, k: env.Key128, i: int):
        if not 0 <= i < self.rows:
            raise IndexError(i)
        raw = self.h.raw_read(self._row_ref(i))
        self.envelope_reads += 1
        vec = np.frombuffer(env.decrypt(k, env.Envelope.from_bytes(raw)), dtype="<f4")
        return vec[: self.cols], vec[self.cols :]


def pm_data_exists(h: Heap) -> bool:
    return h.root(DATA_ROOT) != 0


def load_pm_data(h: Heap) -> Optional[PmMatrix]:
    ptr = h.root(DATA_ROOT)
    return PmMatrix(h, h.deref(ptr, MATRIX_STRUCT)) if ptr else None


def _row_plaintexts(features, labels, classes):
    onehot = np.zeros((len(labels), classes), dtype="<f4")
    onehot[np.arange(len(labels)), labels] = 1
    return np.concatenate([np.asarray(features, dtype="<f4"), onehot], axis=1)


def load_matrix_to_pm(
    h: Heap, features: np.ndarray, labels: np.ndarray, classes: int, k: env.Key128, batch_rows: int = DEFAULT_BATCH_ROWS
) -> PmMatrix:
    """Encrypt ``features`` (float32 rows) with one-hot ``labels`` into PM.

    Resumes a previously interrupted load of the same shape.
    """
    if pm_data_exists(h):
        raise DatasetError("heap already holds training data")
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    rows, cols = features.shape
    if len(labels) != rows:
        raise DatasetError("features and labels disagree on row count")
    pending = h.root(DATA_LOADING_ROOT)
    if pending:
        dm = PmMatrix(h, h.deref(pending, MATRIX_STRUCT))
        if (dm.rows, dm.cols, dm.classes) != (rows, cols, classes):
            raise DatasetError("an interrupted load of a different dataset is pending")
    else:
        with transaction(h):
            hdr = pm_alloc(h, MATRIX_STRUCT)
            index = pm_alloc(h, 8 * rows)
            txn_store(h, hdr, struct.pack("<5Q", rows, cols, classes, 0, h.ptr(index)))
            set_root(h, DATA_LOADING_ROOT, h.ptr(hdr))
        dm = PmMatrix(h, hdr)

    plen = 4 * (cols + classes)
    stride = (plen + env.OVERHEAD + 7) & ~7
    start = dm.loaded
    while start < rows:
        stop = min(rows, start + batch_rows)
        plain = _row_plaintexts(features[start:stop], labels[start:stop], classes)
        chunk = bytearray(stride * (stop - start))
        for j, row in enumerate(plain):
            e = env.encrypt(k, row.tobytes()).to_bytes()
            chunk[j * stride : j * stride + len(e)] = e
        with transaction(h):
            block = pm_alloc(h, len(chunk))
            txn_store(h, block, chunk)
            base = h.ptr(block)
            ptrs = np.arange(stop - start, dtype="<u8") * stride + base
            txn_store(h, dm.index_ref, ptrs.tobytes(), 8 * start)
            store_u64(h, dm.ref, _LOADED, stop)
        start = stop
    with transaction(h):
        set_root(h, DATA_ROOT, h.ptr(dm.ref))
        set_root(h, DATA_LOADING_ROOT, 0)
    return PmMatrix(h, dm.ref)


def load_dataset_to_pm(h: Heap, src: DatasetSource, k: env.Key128, batch_rows: int = DEFAULT_BATCH_ROWS) -> PmMatrix:
    features, labels = src.normalized()
    return load_matrix_to_pm(h, features, labels, src.classes, k, batch_rows)


def decrypt_batch(h: Heap, dm: PmMatrix, k: env.Key128, batch_size: int, rng: BatchSampler) -> Batch:
    if not 1 <= batch_size <= dm.rows:
        raise ValueError(f"batch_size {batch_size} not in [1, {dm.rows}]")
    idx = rng.draw(dm.rows, batch_size)
    x = np.empty((batch_size, dm.cols), dtype=np.float32)
    y = np.empty((batch_size, dm.classes), dtype=np.float32)
    for j, i in enumerate(idx):
        x[j], y[j] = dm.read_row(k, int(i))
    return Batch(x, y)
